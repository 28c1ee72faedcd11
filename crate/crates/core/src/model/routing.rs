//! Iterative routing-by-agreement over precomputed votes.
//!
//! Votes are laid out one row per input capsule of each batch item,
//! `(B·c_in)×(c_out·d)`, with the vote for output `j` in columns
//! `j·d .. (j+1)·d`. Outputs come back as `(B·c_out)×d` poses and
//! `(B·c_out)×1` activations that sum to one per batch item.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor2D;

use super::config::DynamicCoupling;

/// Variance floor added to every EM Gaussian.
pub const EM_VARIANCE_EPS: f64 = 1e-4;

/// Sizes of a routing problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingShape {
    pub c_in: usize,
    pub c_out: usize,
    pub width: usize,
}

impl RoutingShape {
    fn batch(&self, tape: &Tape, votes: Var) -> Result<usize> {
        let (rows, cols) = tape.shape(votes);
        if self.c_in == 0 || self.c_out == 0 || self.width == 0 {
            return Err(Error::InvalidShape(format!("empty routing shape {self:?}")));
        }
        if rows % self.c_in != 0 || cols != self.c_out * self.width {
            return Err(Error::shape("routing votes", (rows, cols), (self.c_in, self.c_out * self.width)));
        }
        Ok(rows / self.c_in)
    }
}

/// Output capsules of a routing step.
#[derive(Debug, Clone, Copy)]
pub struct Routed {
    pub poses: Var,
    pub activations: Var,
}

/// Dynamic routing by agreement.
///
/// Logits start at zero; each iteration turns them into couplings, forms
/// `s_j = Σ_i c_ij û_j|i`, squashes, and (except after the last iteration)
/// adds the agreement `û_j|i · v_j`. Output activations are a softmax over
/// output capsules of the pose lengths.
pub fn dynamic_routing(
    tape: &mut Tape,
    votes: Var,
    shape: RoutingShape,
    iters: usize,
    coupling: DynamicCoupling,
) -> Result<Routed> {
    if iters < 1 {
        return Err(Error::config("routing_iters", "must be at least 1"));
    }
    let batch = shape.batch(tape, votes)?;
    let RoutingShape { c_in, c_out, width } = shape;
    let mut logits = tape.constant(Tensor2D::zeros(batch * c_in, c_out));
    let mut poses = None;
    for it in 0..iters {
        let c = match coupling {
            DynamicCoupling::Outputs => tape.softmax_rows(logits),
            DynamicCoupling::Inputs => {
                let by_output = tape.group_transpose(logits, c_in)?;
                let c = tape.softmax_rows(by_output);
                tape.group_transpose(c, c_out)?
            }
        };
        let c_wide = tape.repeat_cols(c, width);
        let weighted = tape.mul(c_wide, votes)?;
        let s = tape.segment_sum(weighted, c_in)?;
        let s = tape.reshape(s, batch * c_out, width)?;
        let v = tape.squash_rows(s);
        if it + 1 < iters {
            let flat = tape.reshape(v, batch, c_out * width)?;
            let per_input = tape.repeat_rows(flat, c_in);
            let prod = tape.mul(votes, per_input)?;
            let agreement = tape.block_sum_cols(prod, width)?;
            logits = tape.add(logits, agreement)?;
        }
        poses = Some(v);
    }
    let poses = poses.expect("at least one iteration");
    let lengths = tape.row_norm(poses);
    let activations = simplex_over_outputs(tape, lengths, batch, c_out)?;
    Ok(Routed { poses, activations })
}

/// Learned scalars of EM routing, both `1×1`.
#[derive(Debug, Clone, Copy)]
pub struct EmParams {
    pub beta_a: Var,
    pub beta_u: Var,
}

/// EM routing between matrix capsules.
///
/// `input_acts` is `(B·c_in)×1`. Iteration `t` (0-based) uses inverse
/// temperature `λ = 1 + t`. Each iteration runs an M-step; all but the last
/// follow it with an E-step. Final activations are the M-step activations
/// renormalized to sum to one. When `detach` is set the assignment
/// probabilities are treated as constants by backward.
pub fn em_routing(
    tape: &mut Tape,
    votes: Var,
    input_acts: Var,
    learned: EmParams,
    shape: RoutingShape,
    iters: usize,
    detach: bool,
) -> Result<Routed> {
    if iters < 1 {
        return Err(Error::config("routing_iters", "must be at least 1"));
    }
    let batch = shape.batch(tape, votes)?;
    let RoutingShape { c_in, c_out, width } = shape;
    if tape.shape(input_acts) != (batch * c_in, 1) {
        return Err(Error::shape("em input activations", tape.shape(input_acts), (batch * c_in, 1)));
    }
    let mut assign = tape.constant(Tensor2D::full(batch * c_in, c_out, 1.0 / c_out as f64));
    let mut result = None;
    for it in 0..iters {
        let lambda = 1.0 + it as f64;

        // M-step.
        let weights = tape.mul(assign, input_acts)?;
        let mass = tape.segment_sum(weights, c_in)?;
        let mass_wide = tape.repeat_cols(mass, width);
        let weights_wide = tape.repeat_cols(weights, width);
        let weighted_votes = tape.mul(weights_wide, votes)?;
        let sum_votes = tape.segment_sum(weighted_votes, c_in)?;
        let mu = tape.div_or_zero(sum_votes, mass_wide)?;
        let mu_per_input = tape.repeat_rows(mu, c_in);
        let dev = tape.sub(votes, mu_per_input)?;
        let dev_sq = tape.square(dev);
        let weighted_dev = tape.mul(weights_wide, dev_sq)?;
        let sum_dev = tape.segment_sum(weighted_dev, c_in)?;
        let var = tape.div_or_zero(sum_dev, mass_wide)?;
        let var = tape.add_scalar(var, EM_VARIANCE_EPS);
        let log_var = tape.ln(var);
        let half_log_var = tape.scale(log_var, 0.5);
        let cost_h = tape.add(half_log_var, learned.beta_u)?;
        let cost_h = tape.mul(cost_h, mass_wide)?;
        let cost = tape.block_sum_cols(cost_h, width)?;
        // z = λ(β_a − cost)
        let neg = tape.sub(cost, learned.beta_a)?;
        let z = tape.scale(neg, -lambda);
        let log_a = tape.log_sigmoid(z);
        result = Some((mu, log_a));

        // E-step.
        if it + 1 < iters {
            let var_per_input = tape.repeat_rows(var, c_in);
            let ratio = tape.div(dev_sq, var_per_input)?;
            let log_two_pi_var = tape.ln(var_per_input);
            let log_two_pi_var = tape.add_scalar(log_two_pi_var, (2.0 * std::f64::consts::PI).ln());
            let terms = tape.add(ratio, log_two_pi_var)?;
            let terms = tape.scale(terms, -0.5);
            let log_p = tape.block_sum_cols(terms, width)?;
            let log_a_per_input = tape.repeat_rows(log_a, c_in);
            let logits = tape.add(log_p, log_a_per_input)?;
            assign = tape.softmax_rows(logits);
            if detach {
                assign = tape.stop_grad(assign);
            }
        }
    }
    let (mu, log_a) = result.expect("at least one iteration");
    let poses = tape.reshape(mu, batch * c_out, width)?;
    // a_j / Σ a equals a softmax of log a_j.
    let activations = tape.softmax_rows(log_a);
    let activations = tape.reshape(activations, batch * c_out, 1)?;
    Ok(Routed { poses, activations })
}

/// Softmax over the `c_out` capsules of each batch item of a `(B·c_out)×1`
/// column of logits.
pub(crate) fn simplex_over_outputs(tape: &mut Tape, logits: Var, batch: usize, c_out: usize) -> Result<Var> {
    let per_item = tape.reshape(logits, batch, c_out)?;
    let probs = tape.softmax_rows(per_item);
    tape.reshape(probs, batch * c_out, 1)
}
