//! Per-site diffusion MLP that restores the continuous residual `z` the
//! codebook cannot represent, conditioned on the final-scale hidden states.

use serde::{Deserialize, Serialize};
use varsr_numerics::{init, Graph, ParamId, ParamStore, Real, Rng, Tensor, Var};

use crate::arm::model::{modulate, Lin, LN_EPS};
use crate::error::{config, shape, Result, VarsrError};
use crate::guidance::cfg_combine;

/// Cumulative signal levels `ᾱ_0 = 1 > ᾱ_1 > … > ᾱ_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

/// Largest per-step noise fraction; keeps the last step invertible.
pub const MAX_BETA: f64 = 0.999;

/// Cosine schedule `ᾱ_t = f(t)/f(0)`, `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`,
/// with each step's `β_t = 1 − ᾱ_t/ᾱ_{t−1}` capped at [`MAX_BETA`].
pub fn cosine_schedule(t_train: usize, s: f64) -> Result<NoiseSchedule> {
    if t_train < 2 {
        return config(format!("diffusion needs at least 2 steps, got {t_train}"));
    }
    if !(s.is_finite() && s >= 0.0) {
        return config(format!("cosine offset {s} must be finite and non-negative"));
    }
    let f = |t: usize| {
        let x = (t as f64 / t_train as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0);
    let mut alpha_bar = vec![1.0];
    for t in 1..=t_train {
        let closed = f(t) / f0;
        let prev = alpha_bar[t - 1];
        let beta = (1.0 - closed / prev).min(MAX_BETA);
        alpha_bar.push(prev * (1.0 - beta));
    }
    Ok(NoiseSchedule { alpha_bar })
}

impl NoiseSchedule {
    pub fn t_train(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or(VarsrError::Index {
            context: "noise schedule",
            index: t,
            bound: self.alpha_bar.len(),
        })
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `steps` evenly spaced timesteps from 1 to T, ascending.
    pub fn respaced(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.t_train();
        if steps == 0 || steps > t {
            return config(format!("{steps} sampling steps for a {t}-step schedule"));
        }
        if steps == 1 {
            return Ok(vec![t]);
        }
        Ok((0..steps)
            .map(|i| 1 + ((i * (t - 1)) as f64 / (steps - 1) as f64).round() as usize)
            .collect())
    }
}

/// `z_t = √ᾱ_t·z + √(1−ᾱ_t)·ε`.
pub fn diffuse<T: Real>(z: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    if z.shape() != eps.shape() {
        return shape(format!("residual {:?} vs noise {:?}", z.shape(), eps.shape()));
    }
    Ok(z.zip_map(eps, |z, e| a * z + b * e)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub blocks: usize,
    pub width: usize,
    pub t_train: usize,
    /// Resampled inference steps.
    pub steps: usize,
    /// Offset `s` of the cosine schedule.
    pub cosine_s: f64,
    /// Noise draws per site and training step.
    pub repeats: usize,
    /// Bound on the predicted clean residual during sampling, in units of the
    /// residual's training standard deviation.
    pub clip_sigma: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            blocks: 3,
            width: 128,
            t_train: 100,
            steps: 10,
            cosine_s: 0.008,
            repeats: 4,
            clip_sigma: 5.0,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.width == 0 || self.width % 2 != 0 || self.repeats == 0 {
            return config("refiner blocks, repeats and (even) width must be positive");
        }
        if self.steps == 0 || self.steps > self.t_train {
            return config(format!("{} sampling steps for {} training steps", self.steps, self.t_train));
        }
        if !(self.clip_sigma > 0.0) {
            return config("refiner clip must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    ada: Lin,
    fc1: Lin,
    fc2: Lin,
}

/// Handles of the refiner inside a shared parameter store.
#[derive(Clone, Debug)]
pub struct Refiner {
    cfg: RefinerConfig,
    sched: NoiseSchedule,
    latent_dim: usize,
    cond_dim: usize,
    z_scale: ParamId,
    input: Lin,
    cond: Lin,
    time1: Lin,
    time2: Lin,
    blocks: Vec<ResBlock>,
    final_ada: Lin,
    output: Lin,
}

/// Sinusoidal features of (possibly fractional) timesteps, `[rows, width]`.
pub fn timestep_features<T: Real>(ts: &[f64], width: usize) -> Tensor<T> {
    let half = width / 2;
    let mut data = Vec::with_capacity(ts.len() * width);
    for &t in ts {
        for i in 0..half {
            let w = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::of((t * w).cos()));
        }
        for i in 0..half {
            let w = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::of((t * w).sin()));
        }
    }
    Tensor::new(&[ts.len(), width], data).expect("feature shape")
}

/// Result of a sampling run.
#[derive(Clone, Debug)]
pub struct RefinerSample<T> {
    pub z: Tensor<T>,
    pub steps: usize,
}

impl Refiner {
    pub fn new<T: Real>(
        cfg: RefinerConfig,
        latent_dim: usize,
        cond_dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let sched = cosine_schedule(cfg.t_train, cfg.cosine_s)?;
        let w = cfg.width;
        let z_scale = store.add("refiner.z_scale", init::ones(&[1]));
        store.set_frozen(z_scale, true);
        let lin = |store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut Rng| {
            Lin::add(store, name, init::fan_in_normal(&[din, dout], din, rng))
        };
        let input = lin(store, "refiner.input", latent_dim, w, rng);
        let cond = lin(store, "refiner.cond", cond_dim, w, rng);
        let time1 = lin(store, "refiner.time1", w, w, rng);
        let time2 = lin(store, "refiner.time2", w, w, rng);
        let blocks = (0..cfg.blocks)
            .map(|i| ResBlock {
                ada: Lin::add(store, &format!("refiner.block{i}.ada"), init::zeros(&[w, 3 * w])),
                fc1: lin(store, &format!("refiner.block{i}.fc1"), w, w, rng),
                fc2: lin(store, &format!("refiner.block{i}.fc2"), w, w, rng),
            })
            .collect();
        let final_ada = Lin::add(store, "refiner.final_ada", init::zeros(&[w, 2 * w]));
        let output = Lin::add(store, "refiner.output", init::zeros(&[w, latent_dim]));
        Ok(Self {
            cfg,
            sched,
            latent_dim,
            cond_dim,
            z_scale,
            input,
            cond,
            time1,
            time2,
            blocks,
            final_ada,
            output,
        })
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    /// Multiplier that brings residuals to unit scale before diffusion.
    pub fn z_scale<T: Real>(&self, store: &ParamStore<T>) -> f64 {
        store.get(self.z_scale).data()[0].as_f64()
    }

    pub fn set_z_scale<T: Real>(&self, store: &mut ParamStore<T>, scale: f64) -> Result<()> {
        if !(scale.is_finite() && scale > 0.0) {
            return config(format!("residual scale {scale} must be positive"));
        }
        store.get_mut(self.z_scale).data_mut()[0] = T::of(scale);
        Ok(())
    }

    /// Noise prediction `ε_θ(z_t | t, x_K)` for `[M, d]` noisy residuals.
    pub fn predict<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z_t: Var,
        ts: &[f64],
        x_k: Var,
    ) -> Result<Var> {
        let (m, d) = g.value(z_t).dims2()?;
        let (mc, dc) = g.value(x_k).dims2()?;
        if d != self.latent_dim || dc != self.cond_dim || mc != m || ts.len() != m {
            return shape(format!(
                "refiner input {m}x{d}, condition {mc}x{dc}, {} timesteps (expects d={}, width {})",
                ts.len(),
                self.latent_dim,
                self.cond_dim
            ));
        }
        let w = self.cfg.width;
        let tf = g.constant(timestep_features(ts, w));
        let te = self.time1.apply(g, store, tf)?;
        let te = g.silu(te);
        let te = self.time2.apply(g, store, te)?;
        let ce = self.cond.apply(g, store, x_k)?;
        let c = g.add(te, ce)?;
        let c = g.silu(c);

        let mut x = self.input.apply(g, store, z_t)?;
        for blk in &self.blocks {
            let mods = blk.ada.apply(g, store, c)?;
            let sh = g.slice_cols(mods, 0, w)?;
            let sc = g.slice_cols(mods, w, w)?;
            let ga = g.slice_cols(mods, 2 * w, w)?;
            let h = g.layer_norm(x, None, None, LN_EPS)?;
            let h = modulate(g, h, sh, sc)?;
            let h = blk.fc1.apply(g, store, h)?;
            let h = g.silu(h);
            let h = blk.fc2.apply(g, store, h)?;
            let h = g.mul(h, ga)?;
            x = g.add(x, h)?;
        }
        let mods = self.final_ada.apply(g, store, c)?;
        let sh = g.slice_cols(mods, 0, w)?;
        let sc = g.slice_cols(mods, w, w)?;
        let h = g.layer_norm(x, None, None, LN_EPS)?;
        let h = modulate(g, h, sh, sc)?;
        self.output.apply(g, store, h)
    }

    /// Noise-prediction loss averaged over sites, `repeats` draws per site,
    /// with `t` uniform on `1..=T` and `z` in the residual's own units.
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_k: Var,
        z: &Tensor<T>,
        rng: &mut Rng,
    ) -> Result<Var> {
        let (m, d) = z.dims2()?;
        let r = self.cfg.repeats;
        let scale = T::of(self.z_scale(store));
        let big_t = self.sched.t_train();
        let mut zt = Vec::with_capacity(r * m * d);
        let mut eps = Vec::with_capacity(r * m * d);
        let mut ts = Vec::with_capacity(r * m);
        let mut rows = Vec::with_capacity(r * m);
        for _ in 0..r {
            for site in 0..m {
                let t = 1 + rng.below(big_t);
                let ab = self.sched.alpha_bar(t)?;
                let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
                for &zv in z.row(site) {
                    let e = T::of(rng.normal());
                    eps.push(e);
                    zt.push(a * zv * scale + b * e);
                }
                ts.push(t as f64);
                rows.push(site);
            }
        }
        let zt = g.constant(Tensor::new(&[r * m, d], zt)?);
        let eps = g.constant(Tensor::new(&[r * m, d], eps)?);
        let cond = if r == 1 { x_k } else { g.gather_rows(x_k, &rows)? };
        let pred = self.predict(g, store, zt, &ts, cond)?;
        Ok(g.mse(pred, eps)?)
    }

    fn eps<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        t: usize,
        x_k: &Tensor<T>,
        negative: Option<(&Tensor<T>, f64)>,
    ) -> Result<Tensor<T>> {
        let m = x.shape()[0];
        let ts = vec![t as f64; m];
        let run = |cond: &Tensor<T>| -> Result<Tensor<T>> {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let cv = g.constant(cond.clone());
            let out = self.predict(&mut g, store, xv, &ts, cv)?;
            Ok(g.value(out).clone())
        };
        let pos = run(x_k)?;
        match negative {
            Some((neg, lambda)) => cfg_combine(&pos, &run(neg)?, lambda),
            None => Ok(pos),
        }
    }

    /// Ancestral sampling over `steps` resampled timesteps with the fixed
    /// posterior variance, each site drawing noise from its own stream
    /// derived from `seed`. A negative condition with strength `λ` guides
    /// the noise predictions. Returns `ẑ` in the residual's own units.
    pub fn sample<T: Real>(
        &self,
        store: &ParamStore<T>,
        x_k: &Tensor<T>,
        negative: Option<(&Tensor<T>, f64)>,
        steps: usize,
        seed: u64,
    ) -> Result<RefinerSample<T>> {
        let (m, _) = x_k.dims2()?;
        let d = self.latent_dim;
        let taus = self.sched.respaced(steps)?;
        let mut site_rngs: Vec<Rng> = (0..m).map(|s| Rng::derive(seed, "refiner.site", s as u64)).collect();
        let draw = |rngs: &mut [Rng]| -> Tensor<T> {
            Tensor::from_fn(&[m, d], |i| T::of(rngs[i / d].normal()))
        };
        let mut x = draw(&mut site_rngs);
        let clip = self.cfg.clip_sigma;
        for i in (0..taus.len()).rev() {
            let t = taus[i];
            let ab = self.sched.alpha_bar(t)?;
            let ab_prev = if i == 0 { 1.0 } else { self.sched.alpha_bar(taus[i - 1])? };
            let beta = 1.0 - ab / ab_prev;
            let eps = self.eps(store, &x, t, x_k, negative)?;
            let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
            let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            let noise = if i > 0 { Some(draw(&mut site_rngs)) } else { None };
            let mut next = Vec::with_capacity(m * d);
            for j in 0..m * d {
                let xt = x.data()[j].as_f64();
                let x0 = ((xt - (1.0 - ab).sqrt() * eps.data()[j].as_f64()) / ab.sqrt()).clamp(-clip, clip);
                let mut v = c0 * x0 + ct * xt;
                if let Some(n) = &noise {
                    v += var.sqrt() * n.data()[j].as_f64();
                }
                if !v.is_finite() {
                    return Err(VarsrError::Generation(format!("non-finite residual at step t={t}")));
                }
                next.push(T::of(v));
            }
            x = Tensor::new(&[m, d], next)?;
        }
        let inv = T::of(1.0 / self.z_scale(store));
        Ok(RefinerSample {
            z: x.map(|v| v * inv),
            steps: taus.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = cosine_schedule(100, 0.008).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(100).unwrap() < 1e-5);
        assert!(s.alpha_bar(101).is_err());
    }

    #[test]
    fn respacing() {
        let s = cosine_schedule(100, 0.008).unwrap();
        let t = s.respaced(10).unwrap();
        assert_eq!(t.len(), 10);
        assert_eq!((t[0], t[9]), (1, 100));
        assert_eq!(s.respaced(1).unwrap(), vec![100]);
    }
}
