use log::info;
use varsr_numerics::{Real, Rng, Tensor};

use crate::error::{config, shape, Result, VarsrError};

/// Exponential-moving-average codebook learning settings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaConfig {
    pub decay: f64,
    pub laplace: f64,
    /// Steps a code may go unused before it is re-seeded.
    pub dead_patience: usize,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            decay: 0.99,
            laplace: 1e-5,
            dead_patience: 200,
        }
    }
}

/// The shared embedding table plus its EMA statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T: Real = f32> {
    vectors: Tensor<T>,
    ema_counts: Vec<f64>,
    ema_sums: Vec<f64>,
    idle_steps: Vec<usize>,
}

impl<T: Real> Codebook<T> {
    /// Wraps a `|V| × d` table. EMA statistics start at one observation per
    /// code located at the code itself.
    pub fn new(vectors: Tensor<T>) -> Result<Self> {
        let (n, d) = vectors.dims2()?;
        if n == 0 || d == 0 {
            return config("codebook must hold at least one vector of positive width");
        }
        if !vectors.is_finite() {
            return config("codebook contains non-finite values");
        }
        let ema_sums = vectors.data().iter().map(|v| v.as_f64()).collect();
        Ok(Self {
            vectors,
            ema_counts: vec![1.0; n],
            ema_sums,
            idle_steps: vec![0; n],
        })
    }

    /// Restores a codebook with saved EMA statistics.
    pub fn with_state(
        vectors: Tensor<T>,
        ema_counts: Vec<f64>,
        ema_sums: Vec<f64>,
        idle_steps: Vec<usize>,
    ) -> Result<Self> {
        let mut cb = Self::new(vectors)?;
        if ema_counts.len() != cb.size()
            || idle_steps.len() != cb.size()
            || ema_sums.len() != cb.size() * cb.dim()
        {
            return shape("codebook EMA state does not match the table");
        }
        cb.ema_counts = ema_counts;
        cb.ema_sums = ema_sums;
        cb.idle_steps = idle_steps;
        Ok(cb)
    }

    pub fn random(size: usize, dim: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        Self::new(Tensor::randn(&[size, dim], std, rng))
    }

    pub fn size(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vectors(&self) -> &Tensor<T> {
        &self.vectors
    }

    pub fn ema_counts(&self) -> &[f64] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &[f64] {
        &self.ema_sums
    }

    pub fn idle_steps(&self) -> &[usize] {
        &self.idle_steps
    }

    /// Replaces the table (gradient fine-tuning) and re-anchors the EMA sums.
    pub fn set_vectors(&mut self, vectors: Tensor<T>) -> Result<()> {
        if vectors.shape() != self.vectors.shape() {
            return shape(format!(
                "codebook {:?} replaced by {:?}",
                self.vectors.shape(),
                vectors.shape()
            ));
        }
        let d = self.dim();
        for (c, &n) in self.ema_counts.iter().enumerate() {
            for j in 0..d {
                self.ema_sums[c * d + j] = vectors.data()[c * d + j].as_f64() * n;
            }
        }
        self.vectors = vectors;
        Ok(())
    }

    pub fn row(&self, v: usize) -> Result<&[T]> {
        if v >= self.size() {
            return Err(VarsrError::Index {
                context: "codebook lookup",
                index: v,
                bound: self.size(),
            });
        }
        Ok(self.vectors.row(v))
    }

    /// Stored vectors for an index map, as a `n × d` row matrix.
    pub fn lookup(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &v in indices {
            data.extend_from_slice(self.row(v)?);
        }
        Ok(Tensor::new(&[indices.len(), d], data)?)
    }

    /// Nearest code by squared L2 for every row; ties go to the lowest index.
    pub fn nearest(&self, rows: &Tensor<T>) -> Result<Vec<usize>> {
        let (n, d) = rows.dims2()?;
        if d != self.dim() {
            return shape(format!("rows of width {d} against codebook width {}", self.dim()));
        }
        let table = self.vectors.data();
        Ok((0..n)
            .map(|r| {
                let x = rows.row(r);
                let mut best = (T::infinity(), 0);
                for c in 0..self.size() {
                    let v = &table[c * d..(c + 1) * d];
                    let mut dist = T::zero();
                    for j in 0..d {
                        let e = x[j] - v[j];
                        dist += e * e;
                    }
                    if dist < best.0 {
                        best = (dist, c);
                    }
                }
                best.1
            })
            .collect())
    }

    /// One EMA step from `targets` (rows) assigned to codes `assign`.
    ///
    /// Codes idle for longer than the patience window are re-seeded from a
    /// random row of `reseed_pool`. A decay of 1 freezes the codebook.
    /// Returns the re-seeded code ids.
    pub fn ema_update(
        &mut self,
        targets: &Tensor<T>,
        assign: &[usize],
        cfg: &EmaConfig,
        reseed_pool: &Tensor<T>,
        rng: &mut Rng,
    ) -> Result<Vec<usize>> {
        if cfg.decay >= 1.0 {
            return Ok(Vec::new());
        }
        let (n, d) = targets.dims2()?;
        if assign.len() != n || d != self.dim() {
            return shape("EMA targets and assignments disagree");
        }
        let size = self.size();
        let mut counts = vec![0.0f64; size];
        let mut sums = vec![0.0f64; size * d];
        for (r, &c) in assign.iter().enumerate() {
            if c >= size {
                return Err(VarsrError::Index {
                    context: "codebook EMA",
                    index: c,
                    bound: size,
                });
            }
            counts[c] += 1.0;
            for (s, x) in sums[c * d..(c + 1) * d].iter_mut().zip(targets.row(r)) {
                *s += x.as_f64();
            }
        }
        let g = cfg.decay;
        for c in 0..size {
            self.ema_counts[c] = g * self.ema_counts[c] + (1.0 - g) * counts[c];
        }
        for (s, &x) in self.ema_sums.iter_mut().zip(&sums) {
            *s = g * *s + (1.0 - g) * x;
        }
        let total: f64 = self.ema_counts.iter().sum();
        let denom = total + size as f64 * cfg.laplace;
        let data = self.vectors.data_mut();
        for c in 0..size {
            let smoothed = (self.ema_counts[c] + cfg.laplace) / denom * total;
            for j in 0..d {
                data[c * d + j] = T::of(self.ema_sums[c * d + j] / smoothed);
            }
        }
        let mut reseeded = Vec::new();
        let pool_rows = reseed_pool.shape()[0];
        for c in 0..size {
            if counts[c] > 0.0 {
                self.idle_steps[c] = 0;
                continue;
            }
            self.idle_steps[c] += 1;
            if self.idle_steps[c] > cfg.dead_patience && pool_rows > 0 {
                let src = reseed_pool.row(rng.below(pool_rows)).to_vec();
                let data = self.vectors.data_mut();
                data[c * d..(c + 1) * d].copy_from_slice(&src);
                self.ema_counts[c] = 1.0;
                for j in 0..d {
                    self.ema_sums[c * d + j] = src[j].as_f64();
                }
                self.idle_steps[c] = 0;
                reseeded.push(c);
            }
        }
        if !reseeded.is_empty() {
            info!("re-seeded {} dead codes: {:?}", reseeded.len(), reseeded);
        }
        if !self.vectors.is_finite() {
            return Err(VarsrError::Internal("codebook EMA produced non-finite vectors".into()));
        }
        Ok(reseeded)
    }

    pub fn cast<U: Real>(&self) -> Codebook<U> {
        Codebook {
            vectors: self.vectors.cast(),
            ema_counts: self.ema_counts.clone(),
            ema_sums: self.ema_sums.clone(),
            idle_steps: self.idle_steps.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Codebook<f64> {
        Codebook::new(Tensor::new(&[3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap()
    }

    #[test]
    fn lookup_and_range() {
        let cb = small();
        assert_eq!(cb.lookup(&[2]).unwrap().data(), &[0.0, 1.0]);
        assert!(matches!(cb.lookup(&[3]), Err(VarsrError::Index { index: 3, .. })));
    }

    #[test]
    fn ties_pick_lowest_index() {
        let cb = small();
        let q = Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap();
        // All three codes are at squared distance 0.5.
        assert_eq!(cb.nearest(&q).unwrap(), vec![0]);
        let q = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(cb.nearest(&q).unwrap(), vec![1]);
    }

    #[test]
    fn empty_codebook_is_config_error() {
        assert!(matches!(
            Codebook::<f32>::new(Tensor::zeros(&[0, 4])),
            Err(VarsrError::Config(_))
        ));
    }

    #[test]
    fn decay_one_freezes() {
        let mut cb = small();
        let before = cb.clone();
        let t = Tensor::new(&[2, 2], vec![5.0, 5.0, -3.0, 2.0]).unwrap();
        let cfg = EmaConfig {
            decay: 1.0,
            ..EmaConfig::default()
        };
        cb.ema_update(&t, &[0, 1], &cfg, &t, &mut Rng::new(0)).unwrap();
        assert_eq!(cb, before);
    }

    #[test]
    fn ema_moves_toward_targets_and_reseeds() {
        let mut cb = small();
        let t = Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap();
        let cfg = EmaConfig {
            decay: 0.5,
            laplace: 0.0,
            dead_patience: 1,
        };
        cb.ema_update(&t, &[1], &cfg, &t, &mut Rng::new(0)).unwrap();
        // counts: code1 = 0.5·1 + 0.5·1 = 1, sum = 0.5·1 + 0.5·2 = 1.5
        assert!((cb.vectors().row(1)[0] - 1.5).abs() < 1e-12);
        let re = cb.ema_update(&t, &[1], &cfg, &t, &mut Rng::new(0)).unwrap();
        assert_eq!(re, vec![0, 2]);
        assert_eq!(cb.vectors().row(0), &[2.0, 0.0]);
    }
}
