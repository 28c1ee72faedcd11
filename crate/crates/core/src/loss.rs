//! Masked Margin Softmax (MMS) contrastive loss.
//!
//! For a `B×B` similarity matrix `S` with true pairs on the diagonal, let
//! `M = S − δ·I`. The returned loss is
//!
//! ```text
//! −(1/B) Σᵢ [ (Mᵢᵢ − LSE_j Mⱼᵢ) + (Mᵢᵢ − LSE_k Mᵢₖ) ]
//! ```
//!
//! i.e. the negated sum of the two log-softmax terms, one where the second
//! modality is fixed and imposters vary over the first, one the other way
//! round. It is minimized during training.

use crate::error::{Error, Result};
use crate::ops::log_sum_exp;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor2D;

/// Margin used by default.
pub const DEFAULT_DELTA: f64 = 0.001;

/// `S = E1 · E2ᵀ`.
pub fn similarity_matrix(e1: &Tensor2D, e2: &Tensor2D) -> Result<Tensor2D> {
    if e1.shape() != e2.shape() {
        return Err(Error::shape("similarity_matrix", e1.shape(), e2.shape()));
    }
    e1.matmul_nt(e2)
}

fn check_square(s: &Tensor2D) -> Result<usize> {
    if s.rows() == 0 {
        return Err(Error::Empty("mms loss needs at least one batch element"));
    }
    if s.rows() != s.cols() {
        return Err(Error::InvalidShape(format!(
            "similarity matrix must be square, got {:?}",
            s.shape()
        )));
    }
    Ok(s.rows())
}

fn margin_entry(s: &Tensor2D, delta: f64, r: usize, c: usize) -> f64 {
    if r == c {
        s.get(r, c) - delta
    } else {
        s.get(r, c)
    }
}

fn column_lse(s: &Tensor2D, delta: f64, col: usize) -> f64 {
    log_sum_exp((0..s.rows()).map(|j| margin_entry(s, delta, j, col)))
}

fn row_lse(s: &Tensor2D, delta: f64, row: usize) -> f64 {
    log_sum_exp((0..s.cols()).map(|k| margin_entry(s, delta, row, k)))
}

/// Negated MMS loss of one modality pair, log-sum-exp stabilized.
pub fn mms_pair_loss(s: &Tensor2D, delta: f64) -> Result<f64> {
    let b = check_square(s)?;
    let mut total = 0.0;
    for i in 0..b {
        let diag = s.get(i, i) - delta;
        total += (diag - column_lse(s, delta, i)) + (diag - row_lse(s, delta, i));
    }
    Ok(-total / b as f64)
}

/// `∂ mms_pair_loss / ∂S`.
pub(crate) fn mms_pair_loss_grad(s: &Tensor2D, delta: f64) -> Result<Tensor2D> {
    let b = check_square(s)?;
    let col_lse: Vec<f64> = (0..b).map(|c| column_lse(s, delta, c)).collect();
    let row_lse: Vec<f64> = (0..b).map(|r| row_lse(s, delta, r)).collect();
    let inv_b = 1.0 / b as f64;
    Ok(Tensor2D::from_fn(b, b, |r, c| {
        let m = margin_entry(s, delta, r, c);
        let col_softmax = (m - col_lse[c]).exp();
        let row_softmax = (m - row_lse[r]).exp();
        let diag = if r == c { 2.0 } else { 0.0 };
        -inv_b * (diag - col_softmax - row_softmax)
    }))
}

/// Sum of the three pairwise losses `(v,a) + (t,a) + (v,t)`.
pub fn total_loss(video: &Tensor2D, audio: &Tensor2D, text: &Tensor2D, delta: f64) -> Result<f64> {
    if video.shape() != audio.shape() || video.shape() != text.shape() {
        let other = if video.shape() != audio.shape() { audio } else { text };
        return Err(Error::shape("total_loss", video.shape(), other.shape()));
    }
    Ok(mms_pair_loss(&similarity_matrix(video, audio)?, delta)?
        + mms_pair_loss(&similarity_matrix(text, audio)?, delta)?
        + mms_pair_loss(&similarity_matrix(video, text)?, delta)?)
}

/// Differentiable [`total_loss`] on a tape; inputs are `B×D` embeddings.
pub fn total_loss_on_tape(tape: &mut Tape, video: Var, audio: Var, text: Var, delta: f64) -> Result<Var> {
    if tape.shape(video) != tape.shape(audio) || tape.shape(video) != tape.shape(text) {
        return Err(Error::shape("total_loss", tape.shape(video), tape.shape(text)));
    }
    let mut pair = |first: Var, second: Var| -> Result<Var> {
        let s = tape.matmul_nt(first, second)?;
        tape.mms_pair_loss(s, delta)
    };
    let va = pair(video, audio)?;
    let ta = pair(text, audio)?;
    let vt = pair(video, text)?;
    let sum = tape.add(va, ta)?;
    tape.add(sum, vt)
}
