//! Parameter layouts shared by the capsule routers and the baselines.

use crate::error::{Error, Result};
use crate::ops::{Mode, LAYER_NORM_EPS};
use crate::params::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::tape::{AttentionShape, Tape, Var};
use crate::tensor::Tensor2D;

/// Either registers fresh parameters or resolves existing ones by name, so
/// a single layout routine serves both construction and checkpoint loading.
pub(crate) enum Builder<'a> {
    Create { params: &'a mut ParamSet, rng: &'a mut Rng },
    Lookup(&'a ParamSet),
}

fn lookup(params: &ParamSet, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
    let id = params.id(name)?;
    let shape = params.get(id).value.shape();
    if shape != (rows, cols) {
        return Err(Error::InvalidShape(format!(
            "parameter `{name}` has shape {shape:?}, expected {:?}",
            (rows, cols)
        )));
    }
    Ok(id)
}

impl Builder<'_> {
    /// Glorot-uniform weight.
    pub fn weight(&mut self, name: String, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        match self {
            Builder::Create { params, rng } => params.add_glorot(name, rows, cols, fan_in, fan_out, rng),
            Builder::Lookup(params) => lookup(params, &name, rows, cols),
        }
    }

    pub fn constant(&mut self, name: String, rows: usize, cols: usize, value: f64) -> Result<ParamId> {
        match self {
            Builder::Create { params, .. } => params.add(name, Tensor2D::full(rows, cols, value)),
            Builder::Lookup(params) => lookup(params, &name, rows, cols),
        }
    }

    pub fn linear(&mut self, name: &str, n_in: usize, n_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.weight(format!("{name}.w"), n_in, n_out, n_in, n_out)?,
            b: Some(self.constant(format!("{name}.b"), 1, n_out, 0.0)?),
        })
    }

    pub fn linear_no_bias(&mut self, name: &str, n_in: usize, n_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.weight(format!("{name}.w"), n_in, n_out, n_in, n_out)?,
            b: None,
        })
    }

    pub fn norm(&mut self, name: &str, width: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.constant(format!("{name}.gamma"), 1, width, 1.0)?,
            beta: self.constant(format!("{name}.beta"), 1, width, 0.0)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(params, self.w);
        match self.b {
            Some(b) => {
                let b = tape.param(params, b);
                tape.linear(x, w, b)
            }
            None => tape.matmul(x, w),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let gamma = tape.param(params, self.gamma);
        let beta = tape.param(params, self.beta);
        tape.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Query, key and value projections. Keys carry no bias: it would add the
/// same `q·b` to every logit of a query row, which the softmax discards.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Qkv {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl Qkv {
    pub fn new(b: &mut Builder<'_>, prefix: &str, n_in: usize, width: usize) -> Result<Self> {
        Ok(Self {
            q: b.linear(&format!("{prefix}.q"), n_in, width)?,
            k: b.linear_no_bias(&format!("{prefix}.k"), n_in, width)?,
            v: b.linear(&format!("{prefix}.v"), n_in, width)?,
        })
    }

    /// Self-attention over `groups` sets of `n` rows with the `1/√width` scale.
    pub fn self_attend(&self, tape: &mut Tape, params: &ParamSet, x: Var, groups: usize, heads: usize) -> Result<Var> {
        let q = self.q.apply(tape, params, x)?;
        let k = self.k.apply(tape, params, x)?;
        let v = self.v.apply(tape, params, x)?;
        let (rows, width) = tape.shape(q);
        let n = rows / groups;
        tape.attention(q, k, v, attention_shape(groups, n, n, heads, width))
    }
}

pub(crate) fn attention_shape(groups: usize, n_query: usize, n_key: usize, heads: usize, width: usize) -> AttentionShape {
    AttentionShape {
        groups,
        n_query,
        n_key,
        heads,
        scale: 1.0 / (width as f64).sqrt(),
    }
}

/// Post-attention block: `x̂ = LN₂(V′ + MLP(LN₁(V′)))`, dropout inside the MLP.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Block {
    pub norm1: Norm,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub norm2: Norm,
}

impl Block {
    pub fn new(b: &mut Builder<'_>, prefix: &str, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm1: b.norm(&format!("{prefix}.norm1"), width)?,
            mlp1: b.linear(&format!("{prefix}.mlp1"), width, hidden)?,
            mlp2: b.linear(&format!("{prefix}.mlp2"), hidden, width)?,
            norm2: b.norm(&format!("{prefix}.norm2"), width)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, v_prime: Var, drop: &mut Dropout<'_>) -> Result<Var> {
        let n = self.norm1.apply(tape, params, v_prime)?;
        let m = mlp(tape, params, self.mlp1, self.mlp2, n, drop)?;
        let sum = tape.add(v_prime, m)?;
        self.norm2.apply(tape, params, sum)
    }
}

/// Dropout settings threaded through a forward pass.
pub(crate) struct Dropout<'a> {
    pub p: f64,
    pub mode: Mode,
    pub rng: &'a mut Rng,
}

/// `second(dropout(relu(first(x))))`.
pub(crate) fn mlp(tape: &mut Tape, params: &ParamSet, first: Linear, second: Linear, x: Var, drop: &mut Dropout<'_>) -> Result<Var> {
    let h = first.apply(tape, params, x)?;
    let h = tape.relu(h);
    let h = tape.dropout(h, drop.p, drop.mode, &mut *drop.rng)?;
    second.apply(tape, params, h)
}
