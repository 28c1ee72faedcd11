//! Forward kernels shared by the tape and by direct (non-differentiated) callers.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor2D;

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Norms below this are treated as zero by [`squash`].
pub const SQUASH_EPS: f64 = 1e-12;

/// `x · w + b`, with `b` (1×n_out) broadcast over rows.
pub fn linear(x: &Tensor2D, w: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(Error::shape("linear bias", w.shape(), b.shape()));
    }
    let mut out = x.matmul(w)?;
    let bias = b.data();
    for r in 0..out.rows() {
        for (o, &bv) in out.row_mut(r).iter_mut().zip(bias) {
            *o += bv;
        }
    }
    Ok(out)
}

pub fn softmax_rows(m: &Tensor2D) -> Tensor2D {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// `log Σ exp(xᵢ)` with max subtraction.
pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(m: &Tensor2D) -> Tensor2D {
    m.map(sigmoid_scalar)
}

pub fn relu(m: &Tensor2D) -> Tensor2D {
    m.map(|x| x.max(0.0))
}

/// Row-wise standardization without the affine part. Returns the normalized
/// rows and each row's `1/sqrt(var + eps)`; rows with zero spread map to zero.
pub(crate) fn normalize_rows(m: &Tensor2D, eps: f64) -> Result<(Tensor2D, Vec<f64>)> {
    let cols = m.cols();
    if cols < 2 {
        return Err(Error::InvalidShape(format!(
            "layer_norm needs at least 2 columns, got {cols}"
        )));
    }
    let mut out = m.clone();
    let mut inv_std = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        for x in row.iter_mut() {
            *x -= mean;
        }
        let var = row.iter().map(|x| x * x).sum::<f64>() / cols as f64;
        let denom = (var + eps).sqrt();
        let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        for x in row.iter_mut() {
            *x *= inv;
        }
        inv_std.push(inv);
    }
    Ok((out, inv_std))
}

/// Normalizes each row to zero mean and unit variance, then applies
/// `gamma ⊙ · + beta` (both 1×cols).
pub fn layer_norm(m: &Tensor2D, gamma: &Tensor2D, beta: &Tensor2D, eps: f64) -> Result<Tensor2D> {
    let (mut out, _) = normalize_rows(m, eps)?;
    if gamma.shape() != (1, m.cols()) || beta.shape() != (1, m.cols()) {
        return Err(Error::shape("layer_norm affine", gamma.shape(), beta.shape()));
    }
    for r in 0..out.rows() {
        for ((x, g), b) in out.row_mut(r).iter_mut().zip(gamma.data()).zip(beta.data()) {
            *x = *x * g + b;
        }
    }
    Ok(out)
}

pub(crate) fn check_dropout_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config("dropout_p", format!("rate must lie in [0, 1), got {p}")));
    }
    Ok(())
}

/// Inverted-dropout keep mask: entries are `0` or `1/(1-p)`.
pub(crate) fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Tensor2D {
    let keep_scale = 1.0 / (1.0 - p);
    Tensor2D::from_fn(rows, cols, |_, _| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep_scale
        }
    })
}

/// Inverted dropout. Eval mode (or `p = 0`) returns the input unchanged.
pub fn dropout(m: &Tensor2D, p: f64, mode: Mode, rng: &mut Rng) -> Result<Tensor2D> {
    check_dropout_rate(p)?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok(m.clone());
    }
    let mask = dropout_mask(m.rows(), m.cols(), p, rng);
    m.zip_map(&mask, |x, k| x * k)
}

/// Capsule squash: `(‖s‖²/(1+‖s‖²)) · s/‖s‖`.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < SQUASH_EPS {
        return vec![0.0; s.len()];
    }
    let scale = norm / (1.0 + norm * norm);
    s.iter().map(|x| x * scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn t(rows: &[&[f64]]) -> Tensor2D {
        Tensor2D::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_examples() {
        let x = t(&[&[1.0, 2.0]]);
        let out = linear(&x, &Tensor2D::identity(2), &t(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(out.to_rows(), vec![vec![1.0, 2.0]]);
        let out = linear(&x, &Tensor2D::zeros(2, 2), &t(&[&[3.0, 4.0]])).unwrap();
        assert_eq!(out.to_rows(), vec![vec![3.0, 4.0]]);
        // Hand multiply: [1,2]·[[1,1],[1,1]] = [3,3], +[1,0] -> [4,3]; [3,4] -> [7,7] + b -> [8,7].
        let x = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let out = linear(&x, &t(&[&[1.0, 1.0], &[1.0, 1.0]]), &t(&[&[1.0, 0.0]])).unwrap();
        assert_eq!(out.to_rows(), vec![vec![4.0, 3.0], vec![8.0, 7.0]]);
    }

    #[test]
    fn linear_rejects_mismatched_shapes() {
        let x = Tensor2D::zeros(1, 3);
        let err = linear(&x, &Tensor2D::zeros(2, 2), &Tensor2D::zeros(1, 2)).unwrap_err();
        assert!(err.to_string().contains("(1, 3) vs (2, 2)"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let out = softmax_rows(&t(&[&[0.0, 0.0, 0.0]]));
        for &p in out.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        // exp(k)/Σexp evaluated independently: e^1=2.718281828459045, e^2=7.38905609893065,
        // e^3=20.085536923187668, total 30.19287485057736.
        let out = softmax_rows(&t(&[&[1.0, 2.0, 3.0]]));
        let expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (p, e) in out.data().iter().zip(expected) {
            assert!((p - e).abs() < 1e-12);
        }
        let shifted = softmax_rows(&t(&[&[101.0, 102.0, 103.0]]));
        for (a, b) in shifted.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn activation_examples() {
        assert_eq!(sigmoid(&t(&[&[0.0]])).get(0, 0), 0.5);
        assert!((sigmoid_scalar(2.0) - 0.8807970779778823).abs() < 1e-15);
        assert_eq!(relu(&t(&[&[-3.0, 3.0]])).to_rows(), vec![vec![0.0, 3.0]]);
        assert!(sigmoid_scalar(-800.0) > 0.0 || sigmoid_scalar(-800.0) == 0.0);
        assert!(sigmoid_scalar(40.0) <= 1.0);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor2D::full(1, 4, 1.0);
        let zeros = Tensor2D::zeros(1, 4);
        let out = layer_norm(&Tensor2D::full(1, 4, 5.0), &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));

        let (g, b) = (Tensor2D::full(1, 2, 1.0), Tensor2D::zeros(1, 2));
        let out = layer_norm(&t(&[&[1.0, -1.0]]), &g, &b, 0.0).unwrap();
        assert_eq!(out.to_rows(), vec![vec![1.0, -1.0]]);

        // mean 2, population variance 8/3: (x-2)/sqrt(8/3).
        let (g, b) = (Tensor2D::full(1, 3, 1.0), Tensor2D::zeros(1, 3));
        let out = layer_norm(&t(&[&[0.0, 2.0, 4.0]]), &g, &b, 0.0).unwrap();
        let s = (8.0f64 / 3.0).sqrt();
        for (x, e) in out.data().iter().zip([-2.0 / s, 0.0, 2.0 / s]) {
            assert!((x - e).abs() < 1e-12);
        }
        assert!((out.get(0, 2) - 1.2247).abs() < 1e-4);

        assert!(matches!(
            layer_norm(&Tensor2D::zeros(2, 1), &Tensor2D::zeros(1, 1), &Tensor2D::zeros(1, 1), 0.0),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn dropout_modes() {
        let m = Tensor2D::from_fn(4, 5, |r, c| (r * 5 + c) as f64 - 7.5);
        let mut r = rng::stream(1, 0);
        assert_eq!(dropout(&m, 0.5, Mode::Eval, &mut r).unwrap(), m);
        assert_eq!(dropout(&m, 0.0, Mode::Train, &mut r).unwrap(), m);
        assert!(matches!(dropout(&m, 1.0, Mode::Train, &mut r), Err(Error::Config { .. })));
        let out = dropout(&m, 0.5, Mode::Train, &mut r).unwrap();
        for (o, x) in out.data().iter().zip(m.data()) {
            assert!(*o == 0.0 || *o == 2.0 * x);
        }
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut r = rng::stream(2024, 9);
        let mask = dropout_mask(1000, 1000, 0.5, &mut r);
        let survivors = mask.data().iter().filter(|&&k| k != 0.0).count();
        let frac = survivors as f64 / 1e6;
        assert!((0.498..=0.502).contains(&frac), "{frac}");
    }

    #[test]
    fn squash_examples() {
        assert_eq!(squash(&[0.0, 0.0]), vec![0.0, 0.0]);
        let unit = squash(&[0.6, 0.8]);
        let norm = unit.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 0.5).abs() < 1e-15);
        let out = squash(&[3.0, 4.0]);
        assert!((out[0] - 25.0 / 26.0 * 0.6).abs() < 1e-15);
        assert!((out[1] - 25.0 / 26.0 * 0.8).abs() < 1e-15);
    }
}
