//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tape::{Tape, Var};

/// Floor of the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat entry index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of `loss_fn` with `(f(θ+h) − f(θ−h)) / 2h` for
/// every entry of every parameter accepted by `filter`.
///
/// `loss_fn` records a forward pass on the given tape and returns the 1×1
/// loss node; it must be deterministic. Parameter values and gradients are
/// left as they were found.
pub fn grad_check_filtered<F, P>(
    params: &mut ParamSet,
    h: f64,
    tolerance: f64,
    filter: P,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet, &mut Tape) -> Result<Var>,
    P: Fn(&str) -> bool,
{
    let eval = |params: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(params, &mut tape)?;
        Ok(tape.scalar(loss))
    };

    let saved_grads: Vec<_> = params.iter().map(|p| p.grad.clone()).collect();
    params.zero_grads();

    let mut tape = Tape::new();
    let loss = loss_fn(params, &mut tape)?;
    let first = tape.scalar(loss);
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    tape.backward_into(loss, params)?;
    drop(tape);
    let analytic: Vec<_> = params.iter().map(|p| p.grad.clone()).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries_checked: 0,
        tolerance,
    };
    let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        if !filter(name) {
            continue;
        }
        let id = params.id(name)?;
        for e in 0..params.get(id).value.len() {
            let original = params.get(id).value.data()[e];
            params.get_mut(id).value.data_mut()[e] = original + h;
            let plus = eval(params);
            params.get_mut(id).value.data_mut()[e] = original - h;
            let minus = eval(params);
            params.get_mut(id).value.data_mut()[e] = original;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = analytic[pi].data()[e];
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), e));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }

    for (p, g) in params.iter_mut().zip(saved_grads) {
        p.grad = g;
    }
    Ok(report)
}

/// [`grad_check_filtered`] over every parameter.
pub fn grad_check<F>(params: &mut ParamSet, h: f64, tolerance: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet, &mut Tape) -> Result<Var>,
{
    grad_check_filtered(params, h, tolerance, |_| true, loss_fn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor2D;

    fn linear_params() -> ParamSet {
        let mut ps = ParamSet::new();
        let mut r = rng::stream(5, 0);
        ps.add_glorot("w", 3, 2, 3, 2, &mut r).unwrap();
        ps.add_glorot("b", 1, 2, 1, 2, &mut r).unwrap();
        ps.add("unused", Tensor2D::full(2, 2, 0.7)).unwrap();
        ps
    }

    fn sum_of_linear(ps: &ParamSet, tape: &mut Tape) -> Result<Var> {
        let x = tape.constant(Tensor2D::from_fn(4, 3, |r, c| (r as f64 + 0.5) * 0.3 - c as f64 * 0.7));
        let w = tape.param(ps, ps.id("w")?);
        let b = tape.param(ps, ps.id("b")?);
        let y = tape.linear(x, w, b)?;
        Ok(tape.sum_all(y))
    }

    #[test]
    fn linear_loss_is_exact() {
        let mut ps = linear_params();
        let report = grad_check(&mut ps, 1e-5, 1e-8, sum_of_linear).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.entries_checked, 12);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut ps = linear_params();
        let id = ps.id("unused").unwrap();
        let mut tape = Tape::new();
        let loss = sum_of_linear(&ps, &mut tape).unwrap();
        tape.backward_into(loss, &mut ps).unwrap();
        assert!(ps.get(id).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let mut ps = linear_params();
        let calls = Cell::new(0.0);
        let err = grad_check(&mut ps, 1e-5, 1e-4, |ps, tape| {
            calls.set(calls.get() + 1.0);
            let v = sum_of_linear(ps, tape)?;
            Ok(tape.add_scalar(v, calls.get()))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn leaves_params_untouched() {
        let mut ps = linear_params();
        let before: Vec<_> = ps.iter().map(|p| p.value.clone()).collect();
        grad_check(&mut ps, 1e-5, 1e-6, sum_of_linear).unwrap();
        for (p, b) in ps.iter().zip(before) {
            assert_eq!(p.value, b);
            assert!(p.grad.data().iter().all(|&g| g == 0.0));
        }
    }
}
