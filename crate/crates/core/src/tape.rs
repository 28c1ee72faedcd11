//! Reverse-mode differentiation over [`Tensor2D`] values.
//!
//! A [`Tape`] records every primitive in execution order together with the
//! state its backward rule needs. [`Tape::backward`] walks the record in
//! reverse exactly once and returns per-node gradients; parameter leaves are
//! then folded additively into [`ParamSet`] gradients.
//!
//! Binary elementwise ops broadcast their right operand when it is `1×c`
//! (per row), `r×1` (per column) or `1×1`.

use crate::error::{Error, Result};
use crate::ops::{self, Mode};
use crate::params::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor2D};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    /// Division that yields 0 (with zero gradient) where the divisor is exactly 0.
    DivOrZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Exp,
    Ln,
    Square,
    Sigmoid,
    LogSigmoid,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

impl Broadcast {
    fn resolve(a: (usize, usize), b: (usize, usize)) -> Option<Self> {
        if a == b {
            Some(Self::Same)
        } else if b == (1, 1) {
            Some(Self::Scalar)
        } else if b == (1, a.1) {
            Some(Self::Row)
        } else if b == (a.0, 1) {
            Some(Self::Col)
        } else {
            None
        }
    }

    #[inline]
    fn index(self, r: usize, c: usize, cols: usize) -> usize {
        match self {
            Self::Same => r * cols + c,
            Self::Row => c,
            Self::Col => r,
            Self::Scalar => 0,
        }
    }
}

/// Layout of a batched attention call: `groups` independent sets of
/// `n_query` query rows attending over `n_key` key/value rows.
#[derive(Debug, Clone, Copy)]
pub struct AttentionShape {
    pub groups: usize,
    pub n_query: usize,
    pub n_key: usize,
    pub heads: usize,
    pub scale: f64,
}

/// Layout of a capsule vote transform; see [`Tape::capsule_votes`].
#[derive(Debug, Clone, Copy)]
pub struct VoteShape {
    pub c_in: usize,
    pub c_out: usize,
    pub rows_per_capsule: usize,
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Binary {
        kind: BinaryKind,
        bcast: Broadcast,
        a: Var,
        b: Var,
    },
    Unary(UnaryKind, Var),
    Scale(Var, f64),
    AddScalar(Var),
    SoftmaxRows(Var),
    NormalizeRows {
        x: Var,
        inv_std: Vec<f64>,
    },
    Mask {
        x: Var,
        mask: Tensor2D,
    },
    Reshape(Var),
    SegmentSum {
        x: Var,
        group: usize,
    },
    RepeatRows {
        x: Var,
        times: usize,
    },
    Tile(Var),
    GroupTranspose {
        x: Var,
        group: usize,
    },
    BlockSumCols {
        x: Var,
        width: usize,
    },
    RepeatCols {
        x: Var,
        width: usize,
    },
    SumAll(Var),
    RowNorm(Var),
    SquashRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<Tensor2D>,
    },
    CapsuleVotes {
        x: Var,
        w: Var,
        shape: VoteShape,
    },
    MmsPairLoss {
        s: Var,
        delta: f64,
    },
    StopGrad,
}

struct Node {
    value: Tensor2D,
    op: Op,
}

/// Ordered record of executed primitives.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor2D>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor2D> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn grad_buf(grads: &mut [Option<Tensor2D>], var: Var, shape: (usize, usize)) -> &mut Tensor2D {
    grads[var.0].get_or_insert_with(|| Tensor2D::zeros(shape.0, shape.1))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2D, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor2D {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.shape()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.value(var).get(0, 0)
    }

    /// Attention probabilities recorded by an [`Tape::attention`] node, one
    /// `n_query × n_key` matrix per (group, head), group-major.
    pub fn attention_probs(&self, var: Var) -> Option<&[Tensor2D]> {
        match &self.nodes[var.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn constant(&mut self, value: Tensor2D) -> Var {
        self.push(value, Op::Constant)
    }

    /// Records a parameter leaf; its gradient is folded back by
    /// [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.get(id).value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bcast = Broadcast::resolve(av.shape(), bv.shape())
            .ok_or_else(|| Error::shape(name, av.shape(), bv.shape()))?;
        let cols = av.cols();
        let bd = bv.data();
        let value = Tensor2D::from_fn(av.rows(), cols, |r, c| {
            let x = av.data()[r * cols + c];
            let y = bd[bcast.index(r, c, cols)];
            match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
                BinaryKind::DivOrZero => {
                    if y == 0.0 {
                        0.0
                    } else {
                        x / y
                    }
                }
            }
        });
        Ok(self.push(value, Op::Binary { kind, bcast, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    /// `a / b`, defined as 0 wherever `b == 0`.
    pub fn div_or_zero(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::DivOrZero, a, b, "div_or_zero")
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let value = self.value(x).map(|v| match kind {
            UnaryKind::Exp => v.exp(),
            UnaryKind::Ln => v.ln(),
            UnaryKind::Square => v * v,
            UnaryKind::Sigmoid => ops::sigmoid_scalar(v),
            UnaryKind::LogSigmoid => v.min(0.0) - (-v.abs()).exp().ln_1p(),
            UnaryKind::Relu => v.max(0.0),
        });
        self.push(value, Op::Unary(kind, x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Ln, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    /// `ln σ(x)`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::LogSigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v + s);
        self.push(value, Op::AddScalar(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = ops::softmax_rows(self.value(x));
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Row standardization without gain or bias.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (value, inv_std) = ops::normalize_rows(self.value(x), eps)?;
        Ok(self.push(value, Op::NormalizeRows { x, inv_std }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let cols = self.shape(x).1;
        for g in [gamma, beta] {
            if self.shape(g) != (1, cols) {
                return Err(Error::shape("layer_norm affine", self.shape(x), self.shape(g)));
            }
        }
        let n = self.normalize_rows(x, eps)?;
        let scaled = self.mul(n, gamma)?;
        self.add(scaled, beta)
    }

    /// `x · w + b` with `b` broadcast across rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        if self.shape(b) != (1, self.shape(w).1) {
            return Err(Error::shape("linear bias", self.shape(w), self.shape(b)));
        }
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        ops::check_dropout_rate(p)?;
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let (rows, cols) = self.shape(x);
        let mask = ops::dropout_mask(rows, cols, p, rng);
        let value = self.value(x).zip_map(&mask, |a, m| a * m)?;
        Ok(self.push(value, Op::Mask { x, mask }))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(x).clone().reshape(rows, cols)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Sums each run of `group` consecutive rows: `(G·group)×c → G×c`.
    pub fn segment_sum(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        if group == 0 || xv.rows() % group != 0 {
            return Err(Error::InvalidShape(format!(
                "segment_sum: {} rows not divisible into groups of {group}",
                xv.rows()
            )));
        }
        let mut out = Tensor2D::zeros(xv.rows() / group, xv.cols());
        for r in 0..xv.rows() {
            let g = r / group;
            for (o, v) in out.row_mut(g).iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::SegmentSum { x, group }))
    }

    /// Repeats every row `times` times consecutively: `G×c → (G·times)×c`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let out = Tensor2D::from_fn(xv.rows() * times, xv.cols(), |r, c| xv.get(r / times, c));
        self.push(out, Op::RepeatRows { x, times })
    }

    /// Stacks `times` copies of the whole matrix: `n×c → (times·n)×c`.
    pub fn tile(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let n = xv.rows();
        let out = Tensor2D::from_fn(n * times, xv.cols(), |r, c| xv.get(r % n, c));
        self.push(out, Op::Tile(x))
    }

    /// Transposes each block of `group` consecutive rows:
    /// `(G·group)×m → (G·m)×group`.
    pub fn group_transpose(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        if group == 0 || xv.rows() % group != 0 {
            return Err(Error::InvalidShape(format!(
                "group_transpose: {} rows not divisible into groups of {group}",
                xv.rows()
            )));
        }
        let m = xv.cols();
        let out = Tensor2D::from_fn(xv.rows() / group * m, group, |r, i| {
            let (g, j) = (r / m, r % m);
            xv.get(g * group + i, j)
        });
        Ok(self.push(out, Op::GroupTranspose { x, group }))
    }

    /// Sums contiguous column blocks of `width`: `r×(k·width) → r×k`.
    pub fn block_sum_cols(&mut self, x: Var, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if width == 0 || xv.cols() % width != 0 {
            return Err(Error::InvalidShape(format!(
                "block_sum_cols: {} columns not divisible into blocks of {width}",
                xv.cols()
            )));
        }
        let k = xv.cols() / width;
        let out = Tensor2D::from_fn(xv.rows(), k, |r, j| {
            xv.row(r)[j * width..(j + 1) * width].iter().sum()
        });
        Ok(self.push(out, Op::BlockSumCols { x, width }))
    }

    /// Repeats each column `width` times: `r×k → r×(k·width)`.
    pub fn repeat_cols(&mut self, x: Var, width: usize) -> Var {
        let xv = self.value(x);
        let out = Tensor2D::from_fn(xv.rows(), xv.cols() * width, |r, c| xv.get(r, c / width));
        self.push(out, Op::RepeatCols { x, width })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor2D::full(1, 1, s), Op::SumAll(x))
    }

    /// Euclidean norm of each row: `r×c → r×1`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor2D::from_fn(xv.rows(), 1, |r, _| {
            xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()
        });
        self.push(out, Op::RowNorm(x))
    }

    /// Applies [`ops::squash`] to every row.
    pub fn squash_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor2D::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            out.row_mut(r).copy_from_slice(&ops::squash(xv.row(r)));
        }
        self.push(out, Op::SquashRows(x))
    }

    /// Passes the value through and blocks gradient flow.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGrad)
    }

    /// Multi-head scaled dot-product attention, batched over groups.
    ///
    /// Queries are `(groups·n_query)×d`, keys and values `(groups·n_key)×d`.
    /// Head `h` uses columns `h·d/heads .. (h+1)·d/heads`; every head's logits
    /// are multiplied by `shape.scale`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let AttentionShape {
            groups,
            n_query,
            n_key,
            heads,
            scale,
        } = shape;
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidShape(format!(
                "attention width {d} not divisible by {heads} heads"
            )));
        }
        if qv.rows() != groups * n_query {
            return Err(Error::shape("attention queries", qv.shape(), (groups * n_query, d)));
        }
        if kv.shape() != (groups * n_key, d) {
            return Err(Error::shape("attention keys", kv.shape(), (groups * n_key, d)));
        }
        if vv.shape() != kv.shape() {
            return Err(Error::shape("attention values", vv.shape(), kv.shape()));
        }
        let dh = d / heads;
        let mut out = Tensor2D::zeros(groups * n_query, d);
        let mut probs = Vec::with_capacity(groups * heads);
        for g in 0..groups {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut p = Tensor2D::from_fn(n_query, n_key, |i, j| {
                    let qi = &qv.row(g * n_query + i)[cols.clone()];
                    let kj = &kv.row(g * n_key + j)[cols.clone()];
                    scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>()
                });
                for i in 0..n_query {
                    ops::softmax_in_place(p.row_mut(i));
                }
                for i in 0..n_query {
                    let orow = &mut out.row_mut(g * n_query + i)[cols.clone()];
                    for j in 0..n_key {
                        let pij = p.get(i, j);
                        for (o, vx) in orow.iter_mut().zip(&vv.row(g * n_key + j)[cols.clone()]) {
                            *o += pij * vx;
                        }
                    }
                }
                probs.push(p);
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
        ))
    }

    /// Per-pair capsule vote transform.
    ///
    /// `x` holds `rows_per_capsule` rows of width `w_in` for each of `c_in`
    /// input capsules of each batch item: `(B·c_in·rows_per_capsule)×w_in`.
    /// `w` stacks one `w_in×w_out` block per (input, output) pair, input-major:
    /// `(c_in·c_out·w_in)×w_out`. The result has one row per input capsule
    /// holding the votes for every output capsule, output-major:
    /// `(B·c_in)×(c_out·rows_per_capsule·w_out)`.
    pub fn capsule_votes(&mut self, x: Var, w: Var, shape: VoteShape) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let VoteShape {
            c_in,
            c_out,
            rows_per_capsule: rpc,
        } = shape;
        let w_in = xv.cols();
        let w_out = wv.cols();
        if c_in == 0 || rpc == 0 || xv.rows() % (c_in * rpc) != 0 {
            return Err(Error::InvalidShape(format!(
                "capsule_votes: {} rows do not hold {c_in} capsules of {rpc} rows",
                xv.rows()
            )));
        }
        if wv.rows() != c_in * c_out * w_in {
            return Err(Error::shape("capsule_votes transforms", wv.shape(), (c_in * c_out * w_in, w_out)));
        }
        let batch = xv.rows() / (c_in * rpc);
        let block = rpc * w_out;
        let mut out = Tensor2D::zeros(batch * c_in, c_out * block);
        let (xd, wd) = (xv.data(), wv.data());
        for b in 0..batch {
            for i in 0..c_in {
                let x_rows = &xd[(b * c_in + i) * rpc * w_in..(b * c_in + i + 1) * rpc * w_in];
                let out_row = out.row_mut(b * c_in + i);
                for j in 0..c_out {
                    let w_block = &wd[(i * c_out + j) * w_in * w_out..(i * c_out + j + 1) * w_in * w_out];
                    gemm_nn(x_rows, w_block, &mut out_row[j * block..(j + 1) * block], rpc, w_in, w_out);
                }
            }
        }
        Ok(self.push(out, Op::CapsuleVotes { x, w, shape }))
    }

    /// Negated Masked Margin Softmax loss of a `B×B` similarity matrix
    /// (1×1 result). Row `i`, column `j` holds `sim(first_i, second_j)`.
    pub fn mms_pair_loss(&mut self, s: Var, delta: f64) -> Result<Var> {
        let loss = crate::loss::mms_pair_loss(self.value(s), delta)?;
        Ok(self.push(Tensor2D::full(1, 1, loss), Op::MmsPairLoss { s, delta }))
    }

    /// Runs reverse accumulation from the 1×1 node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::InvalidShape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor2D>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2D::full(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Adds every parameter-leaf gradient into `params`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, params: &mut ParamSet) -> Result<()> {
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                params.get_mut(*id).grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    /// [`Tape::backward`] followed by [`Tape::accumulate_param_grads`].
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.backward(loss)?;
        self.accumulate_param_grads(&grads, params)
    }

    fn backward_node(&self, i: usize, dy: &Tensor2D, grads: &mut [Option<Tensor2D>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Param(_) | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                gemm_nt(dy.data(), bv.data(), grad_buf(grads, *a, av.shape()).data_mut(), m, n, k);
                gemm_tn(av.data(), dy.data(), grad_buf(grads, *b, bv.shape()).data_mut(), m, k, n);
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                gemm_nn(dy.data(), bv.data(), grad_buf(grads, *a, av.shape()).data_mut(), m, n, k);
                gemm_tn(dy.data(), av.data(), grad_buf(grads, *b, bv.shape()).data_mut(), m, n, k);
            }
            Op::Binary { kind, bcast, a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cols = av.cols();
                let (ad, bd) = (av.data(), bv.data());
                let mut da = Tensor2D::zeros(av.rows(), cols);
                let mut db = Tensor2D::zeros(bv.rows(), bv.cols());
                for r in 0..av.rows() {
                    for c in 0..cols {
                        let idx = r * cols + c;
                        let bi = bcast.index(r, c, cols);
                        let g = dy.data()[idx];
                        let (x, z) = (ad[idx], bd[bi]);
                        let (ga, gb) = match kind {
                            BinaryKind::Add => (g, g),
                            BinaryKind::Sub => (g, -g),
                            BinaryKind::Mul => (g * z, g * x),
                            BinaryKind::Div => (g / z, -g * x / (z * z)),
                            BinaryKind::DivOrZero => {
                                if z == 0.0 {
                                    (0.0, 0.0)
                                } else {
                                    (g / z, -g * x / (z * z))
                                }
                            }
                        };
                        da.data_mut()[idx] += ga;
                        db.data_mut()[bi] += gb;
                    }
                }
                grad_buf(grads, *a, av.shape()).add_assign(&da)?;
                grad_buf(grads, *b, bv.shape()).add_assign(&db)?;
            }
            Op::Unary(kind, x) => {
                let xv = self.value(*x);
                let buf = grad_buf(grads, *x, xv.shape());
                for (((g, &d), &xi), &yi) in buf.data_mut().iter_mut().zip(dy.data()).zip(xv.data()).zip(y.data()) {
                    *g += d * match kind {
                        UnaryKind::Exp => yi,
                        UnaryKind::Ln => 1.0 / xi,
                        UnaryKind::Square => 2.0 * xi,
                        UnaryKind::Sigmoid => yi * (1.0 - yi),
                        UnaryKind::LogSigmoid => ops::sigmoid_scalar(-xi),
                        UnaryKind::Relu => {
                            if xi > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                }
            }
            Op::Scale(x, s) => {
                let buf = grad_buf(grads, *x, y.shape());
                for (g, d) in buf.data_mut().iter_mut().zip(dy.data()) {
                    *g += d * s;
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = self.shape(*x);
                let buf = grad_buf(grads, *x, shape);
                for (g, d) in buf.data_mut().iter_mut().zip(dy.data()) {
                    *g += d;
                }
            }
            Op::SoftmaxRows(x) => {
                let buf = grad_buf(grads, *x, y.shape());
                for r in 0..y.rows() {
                    let (yr, dr) = (y.row(r), dy.row(r));
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for ((g, &yi), &di) in buf.row_mut(r).iter_mut().zip(yr).zip(dr) {
                        *g += yi * (di - dot);
                    }
                }
            }
            Op::NormalizeRows { x, inv_std } => {
                let n = y.cols() as f64;
                let buf = grad_buf(grads, *x, y.shape());
                for r in 0..y.rows() {
                    let (yr, dr) = (y.row(r), dy.row(r));
                    let mean_d = dr.iter().sum::<f64>() / n;
                    let mean_dy: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((g, &yi), &di) in buf.row_mut(r).iter_mut().zip(yr).zip(dr) {
                        *g += inv_std[r] * (di - mean_d - yi * mean_dy);
                    }
                }
            }
            Op::Mask { x, mask } => {
                let buf = grad_buf(grads, *x, y.shape());
                for ((g, d), m) in buf.data_mut().iter_mut().zip(dy.data()).zip(mask.data()) {
                    *g += d * m;
                }
            }
            Op::SegmentSum { x, group } => {
                let shape = self.shape(*x);
                let buf = grad_buf(grads, *x, shape);
                for r in 0..shape.0 {
                    for (g, d) in buf.row_mut(r).iter_mut().zip(dy.row(r / group)) {
                        *g += d;
                    }
                }
            }
            Op::RepeatRows { x, times } => {
                let shape = self.shape(*x);
                let buf = grad_buf(grads, *x, shape);
                for r in 0..dy.rows() {
                    for (g, d) in buf.row_mut(r / times).iter_mut().zip(dy.row(r)) {
                        *g += d;
                    }
                }
            }
            Op::Tile(x) => {
                let shape = self.shape(*x);
                let buf = grad_buf(grads, *x, shape);
                for r in 0..dy.rows() {
                    for (g, d) in buf.row_mut(r % shape.0).iter_mut().zip(dy.row(r)) {
                        *g += d;
                    }
                }
            }
            Op::GroupTranspose { x, group } => {
                let shape = self.shape(*x);
                let m = shape.1;
                let buf = grad_buf(grads, *x, shape);
                for r in 0..dy.rows() {
                    let (g, j) = (r / m, r % m);
                    for (i, d) in dy.row(r).iter().enumerate() {
                        buf.row_mut(g * group + i)[j] += d;
                    }
                }
            }
            Op::BlockSumCols { x, width } => {
                let shape = self.shape(*x);
                let buf = grad_buf(grads, *x, shape);
                for r in 0..shape.0 {
                    for (c, g) in buf.row_mut(r).iter_mut().enumerate() {
                        *g += dy.get(r, c / width);
                    }
                }
            }
            Op::RepeatCols { x, width } => {
                let shape = self.shape(*x);
                let buf = grad_buf(grads, *x, shape);
                for r in 0..dy.rows() {
                    for (c, d) in dy.row(r).iter().enumerate() {
                        buf.row_mut(r)[c / width] += d;
                    }
                }
            }
            Op::SumAll(x) => {
                let d = dy.get(0, 0);
                let shape = self.shape(*x);
                for g in grad_buf(grads, *x, shape).data_mut() {
                    *g += d;
                }
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x);
                let buf = grad_buf(grads, *x, xv.shape());
                for r in 0..xv.rows() {
                    let norm = y.get(r, 0);
                    if norm == 0.0 {
                        continue;
                    }
                    let d = dy.get(r, 0) / norm;
                    for (g, xi) in buf.row_mut(r).iter_mut().zip(xv.row(r)) {
                        *g += d * xi;
                    }
                }
            }
            Op::SquashRows(x) => {
                let xv = self.value(*x);
                let buf = grad_buf(grads, *x, xv.shape());
                for r in 0..xv.rows() {
                    let s = xv.row(r);
                    let n2: f64 = s.iter().map(|v| v * v).sum();
                    let n = n2.sqrt();
                    if n < ops::SQUASH_EPS {
                        continue;
                    }
                    // out = s·f(n), f(n) = n/(1+n²), f'(n) = (1-n²)/(1+n²)².
                    let f = n / (1.0 + n2);
                    let fp = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2));
                    let dr = dy.row(r);
                    let s_dot_d: f64 = s.iter().zip(dr).map(|(a, b)| a * b).sum();
                    let coef = fp / n * s_dot_d;
                    for ((g, &si), &di) in buf.row_mut(r).iter_mut().zip(s).zip(dr) {
                        *g += f * di + coef * si;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => self.attention_backward(*q, *k, *v, shape, probs, dy, grads)?,
            Op::CapsuleVotes { x, w, shape } => self.votes_backward(*x, *w, shape, dy, grads),
            Op::MmsPairLoss { s, delta } => {
                let sv = self.value(*s);
                let grad = crate::loss::mms_pair_loss_grad(sv, *delta)?;
                let d = dy.get(0, 0);
                let buf = grad_buf(grads, *s, sv.shape());
                for (g, gs) in buf.data_mut().iter_mut().zip(grad.data()) {
                    *g += d * gs;
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: &AttentionShape,
        probs: &[Tensor2D],
        dy: &Tensor2D,
        grads: &mut [Option<Tensor2D>],
    ) -> Result<()> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / shape.heads;
        let (nq, nk) = (shape.n_query, shape.n_key);
        let mut dq = Tensor2D::zeros(qv.rows(), d);
        let mut dk = Tensor2D::zeros(kv.rows(), d);
        let mut dv = Tensor2D::zeros(vv.rows(), d);
        let mut ds = Tensor2D::zeros(nq, nk);
        for g in 0..shape.groups {
            for h in 0..shape.heads {
                let p = &probs[g * shape.heads + h];
                let cols = h * dh..(h + 1) * dh;
                for i in 0..nq {
                    let dyi = &dy.row(g * nq + i)[cols.clone()];
                    let mut row_dot = 0.0;
                    for j in 0..nk {
                        let vj = &vv.row(g * nk + j)[cols.clone()];
                        let dp: f64 = dyi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        ds.set(i, j, dp);
                        row_dot += p.get(i, j) * dp;
                        let pij = p.get(i, j);
                        for (o, a) in dv.row_mut(g * nk + j)[cols.clone()].iter_mut().zip(dyi) {
                            *o += pij * a;
                        }
                    }
                    for j in 0..nk {
                        let val = p.get(i, j) * (ds.get(i, j) - row_dot) * shape.scale;
                        ds.set(i, j, val);
                    }
                }
                for i in 0..nq {
                    for j in 0..nk {
                        let sij = ds.get(i, j);
                        if sij == 0.0 {
                            continue;
                        }
                        let kj = &kv.row(g * nk + j)[cols.clone()];
                        for (o, a) in dq.row_mut(g * nq + i)[cols.clone()].iter_mut().zip(kj) {
                            *o += sij * a;
                        }
                        let qi = &qv.row(g * nq + i)[cols.clone()];
                        for (o, a) in dk.row_mut(g * nk + j)[cols.clone()].iter_mut().zip(qi) {
                            *o += sij * a;
                        }
                    }
                }
            }
        }
        grad_buf(grads, q, qv.shape()).add_assign(&dq)?;
        grad_buf(grads, k, kv.shape()).add_assign(&dk)?;
        grad_buf(grads, v, vv.shape()).add_assign(&dv)?;
        Ok(())
    }

    fn votes_backward(&self, x: Var, w: Var, shape: &VoteShape, dy: &Tensor2D, grads: &mut [Option<Tensor2D>]) {
        let (xv, wv) = (self.value(x), self.value(w));
        let VoteShape {
            c_in,
            c_out,
            rows_per_capsule: rpc,
        } = *shape;
        let (w_in, w_out) = (xv.cols(), wv.cols());
        let batch = xv.rows() / (c_in * rpc);
        let block = rpc * w_out;
        let wsize = w_in * w_out;
        {
            let dx = grad_buf(grads, x, xv.shape());
            for b in 0..batch {
                for i in 0..c_in {
                    let dy_row = dy.row(b * c_in + i);
                    let dx_rows = &mut dx.data_mut()[(b * c_in + i) * rpc * w_in..(b * c_in + i + 1) * rpc * w_in];
                    for j in 0..c_out {
                        let w_block = &wv.data()[(i * c_out + j) * wsize..(i * c_out + j + 1) * wsize];
                        gemm_nt(&dy_row[j * block..(j + 1) * block], w_block, dx_rows, rpc, w_out, w_in);
                    }
                }
            }
        }
        let dw = grad_buf(grads, w, wv.shape());
        for b in 0..batch {
            for i in 0..c_in {
                let dy_row = dy.row(b * c_in + i);
                let x_rows = &xv.data()[(b * c_in + i) * rpc * w_in..(b * c_in + i + 1) * rpc * w_in];
                for j in 0..c_out {
                    let dw_block = &mut dw.data_mut()[(i * c_out + j) * wsize..(i * c_out + j + 1) * wsize];
                    gemm_tn(x_rows, &dy_row[j * block..(j + 1) * block], dw_block, rpc, w_in, w_out);
                }
            }
        }
    }
}
