use crate::error::{NumericsError, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

impl AdamW {
    /// One decoupled-weight-decay Adam update.
    ///
    /// Parameters that are frozen or absent from `grads` are left untouched.
    /// Any non-finite gradient rejects the whole step before anything changes.
    pub fn step<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        grads: &ParamGrads<T>,
        state: &mut OptimizerState<T>,
    ) -> Result<()> {
        if state.m.len() != store.len() {
            return Err(NumericsError::Config(format!(
                "optimizer state tracks {} tensors, store has {}",
                state.m.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                if !g.is_finite() {
                    return Err(NumericsError::NonFiniteGradient {
                        param: store.entry(id).name.clone(),
                    });
                }
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(self.lr / bc1);
        let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
        let eps = T::of(self.eps);
        let decay = T::of(1.0 - self.lr * self.weight_decay);
        for id in store.ids().collect::<Vec<_>>() {
            if store.is_frozen(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                p[j] *= decay;
                p[j] -= step_size * m[j] / ((v[j]).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> (ParamStore<f64>, crate::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::full(&[1], value));
        (s, id)
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let (mut s, id) = single(0.7);
        let mut st = OptimizerState::new(&s);
        let mut g = ParamGrads::empty(1);
        g.set(id, Tensor::zeros(&[1]));
        AdamW { lr: 0.1, ..AdamW::default() }.step(&mut s, &g, &mut st).unwrap();
        assert_eq!(s.get(id).data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = single(0.0);
        let mut st = OptimizerState::new(&s);
        let mut g = ParamGrads::empty(1);
        g.set(id, Tensor::full(&[1], 1.0));
        AdamW { lr: 0.1, ..AdamW::default() }.step(&mut s, &g, &mut st).unwrap();
        // m̂ = v̂ = 1, update = -lr·1/(1+eps)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.get(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_wd() {
        let (mut s, id) = single(2.0);
        let mut st = OptimizerState::new(&s);
        let mut g = ParamGrads::empty(1);
        g.set(id, Tensor::zeros(&[1]));
        let opt = AdamW { lr: 0.1, weight_decay: 5e-2, ..AdamW::default() };
        opt.step(&mut s, &g, &mut st).unwrap();
        assert!((s.get(id).data()[0] - 2.0 * (1.0 - 0.1 * 5e-2)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_grad_rejected_without_side_effects() {
        let (mut s, id) = single(1.0);
        let mut st = OptimizerState::new(&s);
        let mut g = ParamGrads::empty(1);
        g.set(id, Tensor::full(&[1], f64::NAN));
        let err = AdamW::default().step(&mut s, &g, &mut st).unwrap_err();
        assert!(matches!(err, NumericsError::NonFiniteGradient { .. }));
        assert_eq!(st.step, 0);
        assert_eq!(s.get(id).data()[0], 1.0);
    }

    #[test]
    fn frozen_params_untouched() {
        let (mut s, id) = single(1.0);
        s.set_frozen(id, true);
        let mut st = OptimizerState::new(&s);
        let mut g = ParamGrads::empty(1);
        g.set(id, Tensor::full(&[1], 1.0));
        AdamW { weight_decay: 0.1, ..AdamW::default() }.step(&mut s, &g, &mut st).unwrap();
        assert_eq!(s.get(id).data()[0], 1.0);
    }
}
