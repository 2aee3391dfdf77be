use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorcore::{ParamId, ParamStore, Tensor};

/// Adam moments for every parameter of a store, in `ParamId` order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        OptimState {
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamW {
    /// One update. A missing gradient counts as zero.
    pub fn step<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        state: &mut OptimState<T>,
        lr: f64,
    ) -> Result<()> {
        self.step_where(store, grads, state, lr, |_| true)
    }

    /// Like [`AdamW::step`], but parameters rejected by `trainable` are left
    /// untouched (no decay, no moment update).
    pub fn step_where<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        state: &mut OptimState<T>,
        lr: f64,
        trainable: impl Fn(ParamId) -> bool,
    ) -> Result<()> {
        if grads.len() != store.len() || state.first.len() != store.len() {
            return Err(Error::contract(format!(
                "adamw: {} params, {} grads, {} moment slots",
                store.len(),
                grads.len(),
                state.first.len()
            )));
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let decay = T::lit(1.0 - lr * self.weight_decay);
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(self.eps);
        for id in store.ids().filter(|&id| trainable(id)).collect::<Vec<_>>() {
            let param = store.get_mut(id);
            let m = &mut state.first[id.0];
            let v = &mut state.second[id.0];
            if m.shape() != param.shape() {
                return Err(Error::shape("adamw", param.shape(), m.shape()));
            }
            let g = match &grads[id.0] {
                Some(g) if g.shape() != param.shape() => {
                    return Err(Error::shape("adamw", param.shape(), g.shape()))
                }
                Some(g) => Some(g.data()),
                None => None,
            };
            let (p, m, v) = (param.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                p[i] *= decay;
                p[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let scale = T::lit(max_norm / (total + 1e-6));
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    total
}

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to `min_lr`.
pub fn cosine_lr(
    step: u64,
    total_steps: u64,
    warmup_steps: u64,
    base_lr: f64,
    min_lr: f64,
) -> Result<f64> {
    if step > total_steps {
        return Err(Error::contract(format!(
            "lr step {step} beyond total {total_steps}"
        )));
    }
    if warmup_steps >= total_steps && total_steps > 0 {
        return Err(Error::contract(format!(
            "warmup {warmup_steps} must be shorter than total {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let span = (total_steps - warmup_steps).max(1) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single(value: f64) -> (ParamStore<f64>, OptimState<f64>) {
        let mut store = ParamStore::new();
        store
            .add("w", Tensor::new(&[1], vec![value]).unwrap())
            .unwrap();
        let state = OptimState::new(&store);
        (store, state)
    }

    #[test]
    fn zero_lr_leaves_params() {
        let (mut store, mut state) = single(1.5);
        let g = vec![Some(Tensor::new(&[1], vec![0.3]).unwrap())];
        AdamW::default()
            .step(&mut store, &g, &mut state, 0.0)
            .unwrap();
        assert_eq!(store.get(crate::tensorcore::ParamId(0)).item(), 1.5);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_grad_only_decays() {
        let (mut store, mut state) = single(2.0);
        let opt = AdamW::default();
        for _ in 0..3 {
            opt.step(&mut store, &[None], &mut state, 1e-3).unwrap();
        }
        let expected = 2.0 * (1.0 - 5e-5f64).powi(3);
        assert_relative_eq!(
            store.get(crate::tensorcore::ParamId(0)).item(),
            expected,
            max_relative = 1e-14
        );
    }

    #[test]
    fn first_step_matches_hand_formula() {
        let (mut store, mut state) = single(1.0);
        let (g, lr, wd) = (0.5, 1e-2, 0.05);
        let opt = AdamW::default();
        opt.step(
            &mut store,
            &[Some(Tensor::new(&[1], vec![g]).unwrap())],
            &mut state,
            lr,
        )
        .unwrap();
        // m̂ = g, v̂ = g² after bias correction.
        let m_hat = (0.1 * g) / (1.0 - 0.9);
        let v_hat = (0.001 * g * g) / (1.0 - 0.999);
        let expected = 1.0 * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + 1e-8);
        assert_relative_eq!(
            store.get(crate::tensorcore::ParamId(0)).item(),
            expected,
            max_relative = 1e-12
        );
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (mut store, mut state) = single(1.0);
        let bad = vec![Some(Tensor::new(&[2], vec![0.0, 0.0]).unwrap())];
        assert!(AdamW::default()
            .step(&mut store, &bad, &mut state, 1e-3)
            .is_err());
    }

    #[test]
    fn cosine_schedule_landmarks() {
        let (base, min) = (5e-4, 1e-6);
        assert_eq!(cosine_lr(0, 100, 10, base, min).unwrap(), 0.0);
        assert_relative_eq!(cosine_lr(10, 100, 10, base, min).unwrap(), base);
        assert_relative_eq!(cosine_lr(100, 100, 10, base, min).unwrap(), min);
        assert_relative_eq!(
            cosine_lr(55, 100, 10, base, min).unwrap(),
            (base + min) / 2.0,
            max_relative = 1e-12
        );
        assert!(cosine_lr(101, 100, 10, base, min).is_err());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(Tensor::new(&[2], vec![30.0, 40.0]).unwrap()), None];
        let before = clip_grad_norm(&mut g, 10.0);
        assert_relative_eq!(before, 50.0);
        let after: f64 = g[0]
            .as_ref()
            .unwrap()
            .data()
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        assert!(after <= 10.0 + 1e-9);
    }
}
