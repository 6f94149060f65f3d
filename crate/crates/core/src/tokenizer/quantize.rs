//! Multi-scale residual quantization and the token-map operators built on it.

use varsr_numerics::{Real, Rng, Tensor};

use super::codebook::Codebook;
use super::resample::{apply, area_matrix, bilinear_matrix};
use crate::error::{config, shape, Result};
use crate::schedule::Schedule;

/// Index maps `r_1..r_K`, each row-major over its scale's grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPyramid {
    schedule: Schedule,
    maps: Vec<Vec<usize>>,
}

impl TokenPyramid {
    pub fn new(schedule: Schedule, maps: Vec<Vec<usize>>) -> Result<Self> {
        if maps.len() != schedule.len() {
            return shape(format!("{} maps for a {}-scale schedule", maps.len(), schedule.len()));
        }
        for (k, m) in maps.iter().enumerate() {
            if m.len() != schedule.tokens(k) {
                return shape(format!(
                    "scale {k} map has {} tokens, schedule wants {}",
                    m.len(),
                    schedule.tokens(k)
                ));
            }
        }
        Ok(Self { schedule, maps })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn scale(&self, k: usize) -> &[usize] {
        &self.maps[k]
    }

    pub fn maps(&self) -> &[Vec<usize>] {
        &self.maps
    }

    pub fn num_scales(&self) -> usize {
        self.maps.len()
    }

    /// All indices, coarsest scale first.
    pub fn flat(&self) -> Vec<usize> {
        self.maps.concat()
    }
}

/// Which scales contribute to the reconstruction sum.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleMask {
    pub kept: Vec<bool>,
}

impl ScaleMask {
    pub fn all(k: usize) -> Self {
        Self { kept: vec![true; k] }
    }
}

/// Drops each scale except the last independently with probability `p_d`.
///
/// Only the reconstruction sum is affected; the pyramid's indices are left
/// untouched.
pub fn scale_dropout(num_scales: usize, p_d: f64, rng: &mut Rng) -> Result<ScaleMask> {
    if !(0.0..=1.0).contains(&p_d) {
        return config(format!("scale dropout probability {p_d} outside [0, 1]"));
    }
    let kept = (0..num_scales)
        .map(|k| {
            // Always draw so the stream position does not depend on p_d.
            let u = rng.uniform();
            k + 1 == num_scales || u >= p_d
        })
        .collect();
    Ok(ScaleMask { kept })
}

/// Per-schedule resampling operators.
#[derive(Clone, Debug)]
pub struct Quantizer<T: Real = f32> {
    schedule: Schedule,
    /// Area pooling from the latent grid down to scale k.
    down: Vec<Tensor<T>>,
    /// Bilinear upsampling from scale k to the latent grid.
    up: Vec<Tensor<T>>,
}

/// Everything produced by one pass of [`Quantizer::quantize`].
#[derive(Clone, Debug)]
pub struct Quantized<T: Real> {
    pub pyramid: TokenPyramid,
    /// `Σ_k upsample(lookup(V, r_k))` on the latent grid.
    pub recon: Tensor<T>,
    /// Continuous residual `z = f − recon`.
    pub residual: Tensor<T>,
    /// Downsampled running residual each scale was quantized from.
    pub targets: Vec<Tensor<T>>,
}

impl<T: Real> Quantizer<T> {
    pub fn new(schedule: Schedule) -> Self {
        let full = schedule.final_dims();
        let down = schedule.scales().iter().map(|&s| area_matrix(full, s)).collect();
        let up = schedule.scales().iter().map(|&s| bilinear_matrix(s, full)).collect();
        Self { schedule, down, up }
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// Upsampling operator of scale `k` (`N × n_k`).
    pub fn up(&self, k: usize) -> &Tensor<T> {
        &self.up[k]
    }

    pub fn down(&self, k: usize) -> &Tensor<T> {
        &self.down[k]
    }

    fn check_latent(&self, f: &Tensor<T>, codebook: &Codebook<T>) -> Result<()> {
        let (n, d) = f.dims2()?;
        let (h, w) = self.schedule.final_dims();
        if n != h * w || d != codebook.dim() {
            return shape(format!(
                "latent {n}x{d} against final scale {h}x{w} and codebook width {}",
                codebook.dim()
            ));
        }
        Ok(())
    }

    /// Residual quantization: at each scale the running residual is
    /// area-pooled, snapped to its nearest codes, and the upsampled lookup is
    /// subtracted.
    pub fn quantize(&self, f: &Tensor<T>, codebook: &Codebook<T>) -> Result<Quantized<T>> {
        self.check_latent(f, codebook)?;
        let mut running = f.clone();
        let mut recon = Tensor::zeros(f.shape());
        let mut maps = Vec::with_capacity(self.schedule.len());
        let mut targets = Vec::with_capacity(self.schedule.len());
        for k in 0..self.schedule.len() {
            let target = apply(&self.down[k], &running);
            let idx = codebook.nearest(&target)?;
            let up = apply(&self.up[k], &codebook.lookup(&idx)?);
            for ((r, a), &u) in running
                .data_mut()
                .iter_mut()
                .zip(recon.data_mut().iter_mut())
                .zip(up.data())
            {
                *r -= u;
                *a += u;
            }
            maps.push(idx);
            targets.push(target);
        }
        let (recon, residual) = exact_split(f, &recon);
        Ok(Quantized {
            pyramid: TokenPyramid::new(self.schedule.clone(), maps)?,
            recon,
            residual,
            targets,
        })
    }

    /// `Σ_k upsample(lookup(V, r_k))` over the kept scales.
    pub fn reconstruct(
        &self,
        pyramid: &TokenPyramid,
        codebook: &Codebook<T>,
        mask: Option<&ScaleMask>,
    ) -> Result<Tensor<T>> {
        if pyramid.schedule() != &self.schedule {
            return shape("pyramid schedule differs from the quantizer's");
        }
        let n = self.up[0].shape()[0];
        let mut acc = Tensor::zeros(&[n, codebook.dim()]);
        for k in 0..pyramid.num_scales() {
            if mask.is_some_and(|m| !m.kept[k]) {
                continue;
            }
            let up = apply(&self.up[k], &codebook.lookup(pyramid.scale(k))?);
            for (a, &u) in acc.data_mut().iter_mut().zip(up.data()) {
                *a += u;
            }
        }
        Ok(acc)
    }
}

/// Splits `f` into `(recon', z)` with `recon' ≈ recon` and `recon' + z == f`
/// in floating point wherever such a split exists.
///
/// Each element tries `z = f − r` followed by `r' = f − z`, which is exact
/// whenever `|r| ≤ |f|`, then `r` rounded onto the ulp grid of `f`. Elements
/// where `|r|` greatly exceeds `|f|` admit no exact split; they keep the
/// nearest one, off by at most one ulp of `r`.
fn exact_split<T: Real>(f: &Tensor<T>, recon: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let mut r_out = recon.clone();
    let mut z_out = recon.clone();
    for ((r, z), &x) in r_out.data_mut().iter_mut().zip(z_out.data_mut()).zip(f.data()) {
        let (a, b) = split_one(x, *r);
        *r = a;
        *z = b;
    }
    (r_out, z_out)
}

fn split_one<T: Real>(f: T, r: T) -> (T, T) {
    let z = f - r;
    let r1 = f - z;
    if r1 + z == f {
        return (r1, z);
    }
    if f.is_normal() {
        let (_, exp, _) = f.integer_decode();
        let ulp = T::of(2f64.powi(exp as i32));
        let q = r / ulp;
        if q.is_finite() {
            let r2 = q.round() * ulp;
            let z2 = f - r2;
            if r2 + z2 == f {
                return (r2, z2);
            }
        }
    }
    if r + z == f {
        (r, z)
    } else {
        (r1, z)
    }
}

/// Convenience wrapper returning only the pyramid and residual.
pub fn quantize_pyramid<T: Real>(
    f: &Tensor<T>,
    codebook: &Codebook<T>,
    schedule: &Schedule,
) -> Result<(TokenPyramid, Tensor<T>)> {
    let q = Quantizer::new(schedule.clone()).quantize(f, codebook)?;
    Ok((q.pyramid, q.residual))
}

/// Looks up an `h × w` index map and resizes it bilinearly (aligned corners)
/// to `target`.
pub fn interpolate_tokens<T: Real>(
    indices: &[usize],
    dims: (usize, usize),
    codebook: &Codebook<T>,
    target: (usize, usize),
) -> Result<Tensor<T>> {
    if indices.len() != dims.0 * dims.1 {
        return shape(format!("{} indices for a {dims:?} map", indices.len()));
    }
    if target.0 < dims.0 || target.1 < dims.1 {
        return shape(format!("interpolation target {target:?} smaller than {dims:?}"));
    }
    Ok(apply(&bilinear_matrix(dims, target), &codebook.lookup(indices)?))
}
