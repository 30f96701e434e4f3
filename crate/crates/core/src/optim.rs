//! Adam with bias correction and the learning-rate schedules used for training.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    /// `peak · min(t / warmup, sqrt(warmup / t))`
    Warmup { peak: f64, warmup: u64 },
    Constant(f64),
}

impl LrSchedule {
    /// Learning rate for the 1-based step `t`.
    pub fn lr(&self, t: u64) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::Warmup { peak, warmup } => {
                if t == 0 {
                    return 0.0;
                }
                let (t, w) = (t as f64, warmup.max(1) as f64);
                peak * (t / w).min(libm::sqrt(w / t))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn zeros_like(params: &[Tensor<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One Adam update. Gradients are checked for finiteness before anything
/// is modified, so a failed step leaves parameters and moments untouched.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let step = state.t + 1;
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { step });
    }
    state.t = step;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let c1 = T::from_f64(1.0 - libm::pow(cfg.beta1, step as f64));
    let c2 = T::from_f64(1.0 - libm::pow(cfg.beta2, step as f64));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(cfg.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let pd = p.data_mut();
        for j in 0..pd.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            pd[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_from_zero_moments_leaves_params() {
        let mut p = vec![Tensor::new(vec![2], vec![1.5f64, -0.5]).unwrap()];
        let g = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::zeros_like(&p);
        adam_step(&mut p, &g, &mut s, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p[0].data(), &[1.5, -0.5]);
        assert_eq!(s.m[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = vec![Tensor::scalar(0.0f64)];
        let mut s = AdamState::zeros_like(&p);
        s.m[0] = Tensor::scalar(1.0);
        s.v[0] = Tensor::scalar(1.0);
        adam_step(&mut p, &[Tensor::scalar(0.0)], &mut s, 0.1, &AdamConfig::default()).unwrap();
        assert!((s.m[0].data()[0] - 0.9).abs() < 1e-15);
        assert!((s.v[0].data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m = 0.1, v = 0.001, m̂ = 1, v̂ = 1, update = -lr / (1 + eps)
        let mut p = vec![Tensor::scalar(0.0f64)];
        let mut s = AdamState::zeros_like(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s, 0.01, &cfg).unwrap();
        let expect = -0.01 * 1.0 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expect).abs() < 1e-15);
        assert!((s.m[0].data()[0] - 0.1).abs() < 1e-15);
        assert!((s.v[0].data()[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_reports_step_and_keeps_state() {
        let mut p = vec![Tensor::scalar(2.0f64)];
        let mut s = AdamState::zeros_like(&p);
        let err = adam_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut s, 0.1, &AdamConfig::default());
        assert_eq!(err, Err(Error::NonFinite { step: 1 }));
        assert_eq!(p[0].data(), &[2.0]);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn warmup_schedule_peaks_at_warmup() {
        let s = LrSchedule::Warmup {
            peak: 0.01,
            warmup: 100,
        };
        assert!((s.lr(100) - 0.01).abs() < 1e-15);
        assert!((s.lr(50) - 0.005).abs() < 1e-15);
        assert!((s.lr(400) - 0.005).abs() < 1e-15);
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(LrSchedule::Constant(0.001).lr(7), 0.001);
    }
}
