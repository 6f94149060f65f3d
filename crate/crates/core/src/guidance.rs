//! Quality-contrast guidance: the positive/negative combiner and its per-scale
//! strength schedule.

use serde::{Deserialize, Serialize};
use varsr_numerics::{ParamStore, Real, Rng, Tensor};

use crate::arm::{Arm, GenerationState, Sampler, StepOutput};
use crate::error::{config, shape, Result};

/// `pos + λ·(pos − neg)` elementwise.
pub fn cfg_combine<T: Real>(pos: &Tensor<T>, neg: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    if pos.shape() != neg.shape() {
        return shape(format!("guidance branches {:?} vs {:?}", pos.shape(), neg.shape()));
    }
    let l = T::of(lambda);
    pos.zip_map(neg, |p, n| p + l * (p - n)).map_err(Into::into)
}

/// How the strength grows over scales.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ramp {
    /// `λ_max·k/K`.
    #[default]
    Linear,
    /// `λ_max` at every scale.
    Constant,
}

impl std::str::FromStr for Ramp {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Ramp::Linear),
            "constant" => Ok(Ramp::Constant),
            other => Err(format!("unknown ramp `{other}` (linear, constant)")),
        }
    }
}

/// Linear ramp `λ_max·k/K` for 1-based scale `k`.
pub fn lambda_schedule(k: usize, num_scales: usize, lambda_max: f64) -> f64 {
    lambda_max * (k as f64 / num_scales as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSchedule {
    pub lambda_max: f64,
    pub ramp: Ramp,
    /// Also guide the refiner's noise predictions (at `λ_max`).
    pub refiner: bool,
}

impl Default for GuidanceSchedule {
    fn default() -> Self {
        Self {
            lambda_max: 6.0,
            ramp: Ramp::Linear,
            refiner: true,
        }
    }
}

impl GuidanceSchedule {
    pub fn new(lambda_max: f64, ramp: Ramp, refiner: bool) -> Result<Self> {
        if !(lambda_max.is_finite() && lambda_max >= 0.0) {
            return config(format!("guidance strength {lambda_max} must be finite and non-negative"));
        }
        Ok(Self {
            lambda_max,
            ramp,
            refiner,
        })
    }

    /// Strength at 1-based scale `k` of `num_scales`.
    pub fn lambda(&self, k: usize, num_scales: usize) -> f64 {
        match self.ramp {
            Ramp::Linear => lambda_schedule(k, num_scales, self.lambda_max),
            Ramp::Constant => self.lambda_max,
        }
    }

    pub fn per_scale(&self, num_scales: usize) -> Vec<f64> {
        (1..=num_scales).map(|k| self.lambda(k, num_scales)).collect()
    }
}

/// One generation step: a batched forward over every stream, logits combined
/// when a negative stream is present, tokens sampled once and fed to every
/// stream's cache.
pub fn guided_generate_step<T: Real>(
    arm: &Arm<T>,
    store: &ParamStore<T>,
    state: &mut GenerationState<'_, T>,
    guidance: Option<&GuidanceSchedule>,
    sampler: &Sampler,
    rng: &mut Rng,
) -> Result<StepOutput<T>> {
    state.history()?;
    let k = state.step();
    let out = state.forward_step(arm, store)?;
    let logits = match (guidance, out.logits.as_slice()) {
        (Some(gs), [pos, neg]) => cfg_combine(pos, neg, gs.lambda(k + 1, arm.schedule().len()))?,
        (None, [pos]) => pos.clone(),
        _ => {
            return Err(crate::VarsrError::Internal(format!(
                "{} streams for guidance {}",
                out.logits.len(),
                if guidance.is_some() { "on" } else { "off" }
            )))
        }
    };
    let tokens = sampler.sample(&logits, rng)?;
    state.advance(tokens);
    Ok(out)
}

/// Posterior `p(c_p | I)` of a two-class model by Bayes' rule from the
/// prior `p(c_p)` and the two class likelihoods at `I`.
pub fn posterior_positive(prior: f64, lik_pos: f64, lik_neg: f64) -> f64 {
    let a = prior * lik_pos;
    a / (a + (1.0 - prior) * lik_neg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combiner_hand_case() {
        let p = Tensor::new(&[1], vec![2.0f64]).unwrap();
        let n = Tensor::new(&[1], vec![1.0f64]).unwrap();
        assert_eq!(cfg_combine(&p, &n, 6.0).unwrap().data(), &[8.0]);
        assert_eq!(cfg_combine(&p, &n, 0.0).unwrap(), p);
    }

    #[test]
    fn ramp_values() {
        assert_eq!(lambda_schedule(5, 5, 6.0), 6.0);
        assert_eq!(lambda_schedule(5, 10, 6.0), 3.0);
        assert_eq!(lambda_schedule(3, 5, 0.0), 0.0);
    }
}
