//! Adam with bias correction, plus global-norm clipping.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor2D;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Moments indexed like the [`ParamSet`] they were created for.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor2D>,
    pub v: Vec<Tensor2D>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor2D::zeros(p.value.rows(), p.value.cols())).collect();
        Self { m: zeros(), v: zeros(), t: 0, beta1, beta2, eps }
    }

    pub fn with_defaults(params: &ParamSet) -> Self {
        Self::new(params, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS)
    }
}

/// One Adam update at learning rate `lr`, then zeroes every gradient.
///
/// All gradients are checked before anything moves, so a non-finite entry
/// leaves parameters and moments untouched.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::InvalidShape(format!(
            "optimizer tracks {} parameters, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (p, m) in params.iter().zip(&state.m) {
        if p.grad.shape() != m.shape() {
            return Err(Error::shape("adam_step", p.grad.shape(), m.shape()));
        }
        if let Some((index, &value)) = p.grad.data().iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { name: p.name.clone(), index, value });
        }
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let values = p.value.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, &g) in p.grad.data().iter().enumerate() {
            md[i] = b1 * md[i] + (1.0 - b1) * g;
            vd[i] = b2 * vd[i] + (1.0 - b2) * g * g;
            values[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + eps);
        }
    }
    params.zero_grads();
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm.is_finite() && norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.scale_in_place(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(theta: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("theta", Tensor2D::full(1, 1, theta)).unwrap();
        p
    }

    fn set_grad(p: &mut ParamSet, g: f64) {
        p.by_name_mut("theta").unwrap().grad = Tensor2D::full(1, 1, g);
    }

    fn theta(p: &ParamSet) -> f64 {
        p.by_name("theta").unwrap().value.get(0, 0)
    }

    #[test]
    fn zero_gradient_only_advances_t() {
        let mut p = scalar(0.7);
        let mut s = AdamState::with_defaults(&p);
        adam_step(&mut p, &mut s, 0.1).unwrap();
        assert_eq!(theta(&p), 0.7);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_hand_value() {
        let mut p = scalar(0.0);
        let mut s = AdamState::with_defaults(&p);
        set_grad(&mut p, 1.0);
        adam_step(&mut p, &mut s, 0.1).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + eps).
        assert!((theta(&p) + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(p.by_name("theta").unwrap().grad.get(0, 0), 0.0);
    }

    #[test]
    fn repeated_gradient_moves_monotonically() {
        for g in [2.5, -0.3] {
            let mut p = scalar(1.0);
            let mut s = AdamState::with_defaults(&p);
            let mut prev = theta(&p);
            for _ in 0..3 {
                set_grad(&mut p, g);
                adam_step(&mut p, &mut s, 0.01).unwrap();
                let now = theta(&p);
                assert_eq!((now - prev).signum(), -g.signum());
                prev = now;
            }
        }
    }

    #[test]
    fn nan_gradient_names_parameter_and_changes_nothing() {
        let mut p = scalar(3.0);
        let mut s = AdamState::with_defaults(&p);
        set_grad(&mut p, f64::NAN);
        match adam_step(&mut p, &mut s, 0.1) {
            Err(Error::NonFiniteGradient { name, index, .. }) => {
                assert_eq!(name, "theta");
                assert_eq!(index, 0);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(theta(&p), 3.0);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut p = ParamSet::new();
        p.add("a", Tensor2D::zeros(1, 2)).unwrap();
        p.add("b", Tensor2D::zeros(1, 1)).unwrap();
        p.by_name_mut("a").unwrap().grad = Tensor2D::row_vector(&[3.0, 0.0]);
        p.by_name_mut("b").unwrap().grad = Tensor2D::row_vector(&[4.0]);
        assert_eq!(clip_grad_norm(&mut p, 10.0), 5.0);
        assert_eq!(p.grad_norm(), 5.0);
        clip_grad_norm(&mut p, 1.0);
        assert!((p.grad_norm() - 1.0).abs() < 1e-15);
        assert!((p.by_name("a").unwrap().grad.get(0, 0) - 0.6).abs() < 1e-15);
    }
}
