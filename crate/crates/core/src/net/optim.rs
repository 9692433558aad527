//! AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::tape::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.2,
        }
    }
}

/// First and second moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            step: 0,
        }
    }
}

/// One parameter slot handed to [`adamw_step`].
pub struct ParamSlot<'a, T> {
    pub value: &'a mut Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// Decoupled weight decay applies only when set.
    pub decay: bool,
}

/// Applies one AdamW update in place. A non-finite gradient aborts the step
/// before any parameter or moment is touched.
pub fn adamw_step<T: Real>(slots: &mut [ParamSlot<'_, T>], state: &mut OptimState<T>, lr: T, cfg: &AdamWConfig) -> Result<()> {
    if slots.len() != state.m.len() {
        return Err(Error::contract(format!(
            "optimizer tracks {} tensors, got {}",
            state.m.len(),
            slots.len()
        )));
    }
    for (i, s) in slots.iter().enumerate() {
        if s.value.shape() != s.grad.shape() || s.value.shape() != state.m[i].shape() {
            return Err(Error::contract(format!("parameter {i} shape mismatch")));
        }
        if !s.grad.is_finite() {
            return Err(Error::NonFinite {
                step: state.step,
                what: format!("gradient of parameter {i}"),
                last_good: "n/a".into(),
            });
        }
    }
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let eps = T::lit(cfg.eps);
    let wd = T::lit(cfg.weight_decay);
    for (i, s) in slots.iter_mut().enumerate() {
        let decay = if s.decay { T::one() - lr * wd } else { T::one() };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, &g), mi), vi) in s.value.data_mut().iter_mut().zip(s.grad.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p = *p * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `max_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, warmup_steps: u64, max_lr: f64) -> Result<f64> {
    if warmup_steps > total_steps {
        return Err(Error::Config(format!(
            "warmup_steps ({warmup_steps}) exceeds total_steps ({total_steps})"
        )));
    }
    if step > total_steps {
        return Err(Error::contract(format!("step {step} beyond total_steps {total_steps}")));
    }
    if step < warmup_steps {
        return Ok(max_lr * step as f64 / warmup_steps as f64);
    }
    if total_steps == warmup_steps {
        return Ok(max_lr);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok((0.5 * max_lr * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slot<'a>(value: &'a mut Tensor<f64>, grad: &'a Tensor<f64>, decay: bool) -> ParamSlot<'a, f64> {
        ParamSlot { value, grad, decay }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Tensor::new(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(1, 3);
        let mut st = OptimState::new(&[(1, 3)]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut [slot(&mut p, &g, true)], &mut st, 1e-3, &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn single_step_matches_hand_rolled_oracle() {
        let g_vals = [0.5, -2.0, 1e-3];
        let p0 = [1.0, 1.0, -1.0];
        let mut p = Tensor::new(1, 3, p0.to_vec()).unwrap();
        let g = Tensor::new(1, 3, g_vals.to_vec()).unwrap();
        let mut st = OptimState::new(&[(1, 3)]);
        let cfg = AdamWConfig::default();
        let lr = 0.01;
        adamw_step(&mut [slot(&mut p, &g, true)], &mut st, lr, &cfg).unwrap();
        for i in 0..3 {
            // bias-corrected first step: m̂ = g, v̂ = g²
            let m = (1.0 - 0.9) * g_vals[i] / (1.0 - 0.9);
            let v = (1.0 - 0.98) * g_vals[i] * g_vals[i] / (1.0 - 0.98);
            let expected = p0[i] * (1.0 - lr * 0.2) - lr * m / (v.sqrt() + 1e-8);
            assert!((p.data()[i] - expected).abs() < 1e-15);
            // ≈ −lr·sign(g) on top of decay
            assert!((p.data()[i] - p0[i] * (1.0 - lr * 0.2) + lr * g_vals[i].signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn scalars_are_not_decayed() {
        let mut s = Tensor::scalar(2.0);
        let g = Tensor::scalar(0.0);
        let mut st = OptimState::new(&[(1, 1)]);
        adamw_step(&mut [slot(&mut s, &g, false)], &mut st, 0.1, &AdamWConfig::default()).unwrap();
        assert_eq!(s.item(), 2.0);

        let mut w = Tensor::scalar(2.0);
        let mut st = OptimState::new(&[(1, 1)]);
        adamw_step(&mut [slot(&mut w, &g, true)], &mut st, 0.1, &AdamWConfig::default()).unwrap();
        assert!((w.item() - 2.0 * (1.0 - 0.1 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_halts_without_side_effects() {
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(f64::NAN);
        let mut st = OptimState::new(&[(1, 1)]);
        let err = adamw_step(&mut [slot(&mut p, &g, true)], &mut st, 0.1, &AdamWConfig::default());
        assert!(matches!(err, Err(Error::NonFinite { .. })));
        assert_eq!(p.item(), 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 100, 10, 5e-4).unwrap(), 0.0);
        assert_eq!(lr_at(10, 100, 10, 5e-4).unwrap(), 5e-4);
        assert!(lr_at(100, 100, 10, 5e-4).unwrap().abs() < 1e-20);
        assert!((lr_at(5, 100, 10, 5e-4).unwrap() - 2.5e-4).abs() < 1e-18);
        assert!((lr_at(55, 100, 10, 5e-4).unwrap() - 2.5e-4).abs() < 1e-12);
        assert!(matches!(lr_at(0, 10, 20, 5e-4), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let mut prev = f64::INFINITY;
        for s in 10..=100 {
            let lr = lr_at(s, 100, 10, 1.0).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
