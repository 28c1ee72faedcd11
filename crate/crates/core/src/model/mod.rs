//! Multimodal capsule network.
//!
//! Each modality has its own primary-capsule extractor. Everything after it
//! (routing, the activation head and the output projection) is stored once
//! under the `shared.` prefix when weights are shared, or once per modality
//! under the modality name otherwise.
//!
//! [`CapsNet`] holds only the architecture: configuration and the ids of its
//! parameters. Values live in a separate [`ParamSet`] so that callers such as
//! finite-difference checks can run the same network over perturbed copies.

pub mod config;
mod layers;
pub mod routing;

use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::params::{ParamId, ParamSet};
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var, VoteShape};
use crate::tensor::Tensor2D;

pub use config::{Architecture, DynamicCoupling, InputDims, Modality, ModelConfig, RoutingKind};
use layers::{attention_shape, mlp, Block, Builder, Dropout, Linear, Qkv};
pub use routing::{dynamic_routing, em_routing, EmParams, Routed, RoutingShape};

/// Poses and activations of one capsule layer for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleSet {
    /// `C×d`.
    pub poses: Tensor2D,
    pub activations: Vec<f64>,
}

/// A capsule layer of a batch on a tape: `(B·C)×d` poses, `(B·C)×1`
/// activations.
#[derive(Debug, Clone, Copy)]
pub struct CapsVars {
    pub poses: Var,
    pub activations: Var,
    pub batch: usize,
}

/// Result of routing a batch, with intermediates exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct RouteOutput {
    pub secondary: CapsVars,
    /// Activation-scaled primary poses `r = p·x`.
    pub routing_input: Var,
    /// The attention node, for routers that use one.
    pub attention: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
struct Primary {
    pose: Linear,
    act: Linear,
}

#[derive(Debug, Clone, Copy)]
enum Router {
    SelfAttention { qkv: Qkv, block: Block },
    Dynamic { transforms: ParamId },
    Em { transforms: ParamId, beta_a: ParamId, beta_u: ParamId },
    SetTransformer { seeds: ParamId, k: Linear, v: Linear, block: Block },
    None { mlp1: Linear, mlp2: Linear },
}

#[derive(Debug, Clone, Copy)]
struct Post {
    router: Router,
    act_head: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
enum Layout {
    Capsule { primary: [Primary; 3], post: Vec<Post>, post_of: [usize; 3] },
    Fc { fc1: [Linear; 3], fc2: Vec<Linear>, post_of: [usize; 3] },
    PlainAttention { qkv: [Qkv; 3], post: Vec<(Block, Linear)>, post_of: [usize; 3] },
}

/// Architecture of the network: configuration plus parameter layout.
#[derive(Debug, Clone)]
pub struct CapsNet {
    config: ModelConfig,
    layout: Layout,
}

/// Prefix of the post-primary parameters used by `m`.
pub fn post_prefix(config: &ModelConfig, m: Modality) -> &'static str {
    if config.share_weights {
        "shared"
    } else {
        m.name()
    }
}

impl CapsNet {
    /// Registers freshly initialized parameters for `config` in `params`.
    pub fn new(config: ModelConfig, params: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        Self::build(config, Builder::Create { params, rng })
    }

    /// Resolves the parameters of `config` in an existing set, checking shapes.
    pub fn from_params(config: ModelConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        Self::build(config, Builder::Lookup(params))
    }

    fn build(config: ModelConfig, mut b: Builder<'_>) -> Result<Self> {
        let c = config.num_capsules;
        let (d1, d2) = (config.primary_dim, config.secondary_dim);
        let hidden = config.hidden_mlp;
        let prefixes: Vec<&str> = if config.share_weights {
            vec!["shared"]
        } else {
            Modality::ALL.iter().map(|m| m.name()).collect()
        };
        let post_of = if config.share_weights { [0, 0, 0] } else { [0, 1, 2] };

        let layout = match config.architecture {
            Architecture::Capsule => {
                let primary = try_modalities(|m| {
                    let n_in = config.input_dims.get(m);
                    Ok(Primary {
                        pose: b.linear(&format!("{m}.primary.pose"), n_in, c * d1)?,
                        act: b.linear(&format!("{m}.primary.act"), n_in, c)?,
                    })
                })?;
                let mut post = Vec::new();
                for p in &prefixes {
                    let route = format!("{p}.route");
                    let router = match config.routing {
                        RoutingKind::SelfAttention => Router::SelfAttention {
                            qkv: Qkv::new(&mut b, &route, d1, d2)?,
                            block: Block::new(&mut b, &route, d2, hidden)?,
                        },
                        RoutingKind::Dynamic => Router::Dynamic {
                            transforms: b.weight(format!("{route}.transforms"), c * c * d1, d2, d1, d2)?,
                        },
                        RoutingKind::Em => {
                            let k = config.matrix_side().expect("validated");
                            Router::Em {
                                transforms: b.weight(format!("{route}.transforms"), c * c * k, k, k, k)?,
                                beta_a: b.constant(format!("{route}.beta_a"), 1, 1, 0.0)?,
                                beta_u: b.constant(format!("{route}.beta_u"), 1, 1, 0.0)?,
                            }
                        }
                        RoutingKind::SetTransformer => Router::SetTransformer {
                            seeds: b.weight(format!("{route}.seeds"), c, d2, c, d2)?,
                            k: b.linear_no_bias(&format!("{route}.k"), d1, d2)?,
                            v: b.linear(&format!("{route}.v"), d1, d2)?,
                            block: Block::new(&mut b, &route, d2, hidden)?,
                        },
                        RoutingKind::None => Router::None {
                            mlp1: b.linear(&format!("{route}.mlp1"), d1, hidden)?,
                            mlp2: b.linear(&format!("{route}.mlp2"), hidden, d2)?,
                        },
                    };
                    post.push(Post {
                        router,
                        // A bias here would shift every capsule's logit equally and
                        // cancel in the softmax over capsules, so none is kept.
                        act_head: b.linear_no_bias(&format!("{p}.act_head"), d2, 1)?,
                        out: b.linear(&format!("{p}.out"), c * d2, config.embed_dim)?,
                    });
                }
                Layout::Capsule { primary, post, post_of }
            }
            Architecture::Fc => {
                let fc1 = try_modalities(|m| b.linear(&format!("{m}.fc1"), config.input_dims.get(m), hidden))?;
                let fc2 = prefixes
                    .iter()
                    .map(|p| b.linear(&format!("{p}.fc2"), hidden, config.embed_dim))
                    .collect::<Result<_>>()?;
                Layout::Fc { fc1, fc2, post_of }
            }
            Architecture::PlainAttention => {
                let n = config.attention_groups;
                let qkv = try_modalities(|m| Qkv::new(&mut b, &format!("{m}.attn"), config.input_dims.get(m) / n, d2))?;
                let mut post = Vec::new();
                for p in &prefixes {
                    post.push((
                        Block::new(&mut b, &format!("{p}.attn"), d2, hidden)?,
                        b.linear(&format!("{p}.out"), n * d2, config.embed_dim)?,
                    ));
                }
                Layout::PlainAttention { qkv, post, post_of }
            }
        };
        Ok(Self { config, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(&self, tape: &Tape, x: Var, m: Modality) -> Result<usize> {
        let (rows, cols) = tape.shape(x);
        let want = self.config.input_dims.get(m);
        if cols != want {
            return Err(Error::shape("model input", (rows, cols), (rows, want)));
        }
        if rows == 0 {
            return Err(Error::Empty("model input batch"));
        }
        Ok(rows)
    }

    fn capsule_layout(&self) -> Result<(&[Primary; 3], &[Post], &[usize; 3])> {
        match &self.layout {
            Layout::Capsule { primary, post, post_of } => Ok((primary, post, post_of)),
            _ => Err(Error::config("architecture", "operation needs the capsule architecture")),
        }
    }

    /// Primary capsules of a `B×in` batch.
    pub fn primary_on_tape(&self, tape: &mut Tape, params: &ParamSet, x: Var, m: Modality) -> Result<CapsVars> {
        let batch = self.check_input(tape, x, m)?;
        let (primary, _, _) = self.capsule_layout()?;
        let layer = primary[m.index()];
        let c = self.config.num_capsules;
        let poses = layer.pose.apply(tape, params, x)?;
        let poses = tape.reshape(poses, batch * c, self.config.primary_dim)?;
        let logits = layer.act.apply(tape, params, x)?;
        let acts = tape.sigmoid(logits);
        let activations = tape.reshape(acts, batch * c, 1)?;
        Ok(CapsVars { poses, activations, batch })
    }

    /// Routes primary capsules to secondary capsules.
    pub fn route_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        caps: CapsVars,
        m: Modality,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<RouteOutput> {
        let (_, post, post_of) = self.capsule_layout()?;
        let post = post[post_of[m.index()]];
        let cfg = &self.config;
        let (c, d2, batch) = (cfg.num_capsules, cfg.secondary_dim, caps.batch);
        if tape.shape(caps.poses) != (batch * c, cfg.primary_dim) {
            return Err(Error::shape("primary poses", tape.shape(caps.poses), (batch * c, cfg.primary_dim)));
        }
        let mut drop = Dropout { p: cfg.dropout_p, mode, rng };
        let r = tape.mul(caps.poses, caps.activations)?;
        let mut attention = None;
        let shape = RoutingShape { c_in: c, c_out: c, width: d2 };

        let (poses, activations) = match post.router {
            Router::SelfAttention { qkv, block } => {
                let v_prime = qkv.self_attend(tape, params, r, batch, cfg.heads)?;
                attention = Some(v_prime);
                let poses = block.apply(tape, params, v_prime, &mut drop)?;
                (poses, None)
            }
            Router::SetTransformer { seeds, k, v, block } => {
                let seeds = tape.param(params, seeds);
                let q = tape.tile(seeds, batch);
                let keys = k.apply(tape, params, r)?;
                let values = v.apply(tape, params, r)?;
                let v_prime = tape.attention(q, keys, values, attention_shape(batch, c, c, cfg.heads, d2))?;
                attention = Some(v_prime);
                let poses = block.apply(tape, params, v_prime, &mut drop)?;
                (poses, None)
            }
            Router::None { mlp1, mlp2 } => (mlp(tape, params, mlp1, mlp2, r, &mut drop)?, None),
            Router::Dynamic { transforms } => {
                let w = tape.param(params, transforms);
                let votes = tape.capsule_votes(r, w, VoteShape { c_in: c, c_out: c, rows_per_capsule: 1 })?;
                let out = dynamic_routing(tape, votes, shape, cfg.routing_iters, cfg.dynamic_coupling)?;
                (out.poses, Some(out.activations))
            }
            Router::Em { transforms, beta_a, beta_u } => {
                let k = cfg.matrix_side().expect("validated");
                let w = tape.param(params, transforms);
                let matrices = tape.reshape(caps.poses, batch * c * k, k)?;
                let votes = tape.capsule_votes(matrices, w, VoteShape { c_in: c, c_out: c, rows_per_capsule: k })?;
                let learned = EmParams {
                    beta_a: tape.param(params, beta_a),
                    beta_u: tape.param(params, beta_u),
                };
                let out = em_routing(tape, votes, caps.activations, learned, shape, cfg.routing_iters, cfg.em_detach_assignments)?;
                (out.poses, Some(out.activations))
            }
        };
        let activations = match activations {
            Some(a) => a,
            None => {
                let logits = post.act_head.apply(tape, params, poses)?;
                routing::simplex_over_outputs(tape, logits, batch, c)?
            }
        };
        Ok(RouteOutput {
            secondary: CapsVars { poses, activations, batch },
            routing_input: r,
            attention,
        })
    }

    /// Activation-weighted concatenation of secondary poses, projected to `D`.
    pub fn project_on_tape(&self, tape: &mut Tape, params: &ParamSet, caps: CapsVars, m: Modality) -> Result<Var> {
        let (_, post, post_of) = self.capsule_layout()?;
        let out = post[post_of[m.index()]].out;
        let c = self.config.num_capsules;
        let weighted = tape.mul(caps.poses, caps.activations)?;
        let flat = tape.reshape(weighted, caps.batch, c * self.config.secondary_dim)?;
        out.apply(tape, params, flat)
    }

    /// `B×in` features to `B×D` embeddings.
    pub fn embed_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        m: Modality,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let batch = self.check_input(tape, x, m)?;
        let cfg = &self.config;
        match &self.layout {
            Layout::Capsule { .. } => {
                let primary = self.primary_on_tape(tape, params, x, m)?;
                let routed = self.route_on_tape(tape, params, primary, m, mode, rng)?;
                self.project_on_tape(tape, params, routed.secondary, m)
            }
            Layout::Fc { fc1, fc2, post_of } => {
                let h = fc1[m.index()].apply(tape, params, x)?;
                let h = tape.relu(h);
                fc2[post_of[m.index()]].apply(tape, params, h)
            }
            Layout::PlainAttention { qkv, post, post_of } => {
                let n = cfg.attention_groups;
                let rows = tape.reshape(x, batch * n, cfg.input_dims.get(m) / n)?;
                let v_prime = qkv[m.index()].self_attend(tape, params, rows, batch, cfg.heads)?;
                let (block, out) = post[post_of[m.index()]];
                let mut drop = Dropout { p: cfg.dropout_p, mode, rng };
                let h = block.apply(tape, params, v_prime, &mut drop)?;
                let flat = tape.reshape(h, batch, n * cfg.secondary_dim)?;
                out.apply(tape, params, flat)
            }
        }
    }

    /// Embeds a `B×in` batch without recording gradients.
    pub fn embed(&self, params: &ParamSet, feats: &Tensor2D, m: Modality, mode: Mode, rng: &mut Rng) -> Result<Tensor2D> {
        let mut tape = Tape::new();
        let x = tape.constant(feats.clone());
        let e = self.embed_on_tape(&mut tape, params, x, m, mode, rng)?;
        Ok(tape.value(e).clone())
    }

    /// Embeds one feature vector.
    pub fn forward(&self, params: &ParamSet, feat: &[f64], m: Modality, mode: Mode, rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self.embed(params, &Tensor2D::row_vector(feat), m, mode, rng)?.to_vec())
    }

    /// Primary capsules of one feature vector.
    pub fn extract_primary_capsules(&self, params: &ParamSet, feat: &[f64], m: Modality) -> Result<CapsuleSet> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2D::row_vector(feat));
        let caps = self.primary_on_tape(&mut tape, params, x, m)?;
        Ok(to_capsule_set(&tape, caps))
    }

    /// Routes one primary [`CapsuleSet`].
    pub fn route(&self, params: &ParamSet, caps: &CapsuleSet, m: Modality, mode: Mode, rng: &mut Rng) -> Result<CapsuleSet> {
        let mut tape = Tape::new();
        let vars = from_capsule_set(&mut tape, caps)?;
        let routed = self.route_on_tape(&mut tape, params, vars, m, mode, rng)?;
        Ok(to_capsule_set(&tape, routed.secondary))
    }

    /// Projects one secondary [`CapsuleSet`] to the joint space.
    pub fn project_joint(&self, params: &ParamSet, caps: &CapsuleSet, m: Modality) -> Result<Vec<f64>> {
        let expected = (self.config.num_capsules, self.config.secondary_dim);
        if caps.poses.shape() != expected {
            return Err(Error::shape("project_joint", caps.poses.shape(), expected));
        }
        let mut tape = Tape::new();
        let vars = from_capsule_set(&mut tape, caps)?;
        let out = self.project_on_tape(&mut tape, params, vars, m)?;
        Ok(tape.value(out).to_vec())
    }

    /// Secondary activations of a batch, `B×C`, evaluated deterministically.
    pub fn secondary_activations(&self, params: &ParamSet, feats: &Tensor2D, m: Modality) -> Result<Tensor2D> {
        let mut tape = Tape::new();
        let x = tape.constant(feats.clone());
        let primary = self.primary_on_tape(&mut tape, params, x, m)?;
        let mut rng = rng::stream(0, 0);
        let routed = self.route_on_tape(&mut tape, params, primary, m, Mode::Eval, &mut rng)?;
        tape.value(routed.secondary.activations)
            .clone()
            .reshape(primary.batch, self.config.num_capsules)
    }

}

fn try_modalities<T>(mut f: impl FnMut(Modality) -> Result<T>) -> Result<[T; 3]> {
    Ok([f(Modality::Video)?, f(Modality::Audio)?, f(Modality::Text)?])
}

fn to_capsule_set(tape: &Tape, caps: CapsVars) -> CapsuleSet {
    CapsuleSet {
        poses: tape.value(caps.poses).clone(),
        activations: tape.value(caps.activations).to_vec(),
    }
}

fn from_capsule_set(tape: &mut Tape, caps: &CapsuleSet) -> Result<CapsVars> {
    if caps.activations.len() != caps.poses.rows() {
        return Err(Error::shape("capsule activations", (caps.activations.len(), 1), (caps.poses.rows(), 1)));
    }
    let poses = tape.constant(caps.poses.clone());
    let activations = tape.constant(Tensor2D::from_vec(caps.activations.len(), 1, caps.activations.clone())?);
    Ok(CapsVars { poses, activations, batch: 1 })
}

/// A network together with its parameter values.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: CapsNet,
    pub params: ParamSet,
}

impl Model {
    /// Fresh model initialized from the `INIT` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = rng::stream(seed, rng::streams::INIT);
        let net = CapsNet::new(config, &mut params, &mut rng)?;
        Ok(Self { net, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let net = CapsNet::from_params(config, &params)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    /// Deterministic embedding of a batch.
    pub fn embed(&self, feats: &Tensor2D, m: Modality) -> Result<Tensor2D> {
        let mut rng = rng::stream(0, 0);
        self.net.embed(&self.params, feats, m, Mode::Eval, &mut rng)
    }
}

#[cfg(test)]
impl CapsNet {
    /// Builds without validating, for degenerate sizes such as `C = 1`.
    fn unchecked(config: ModelConfig, params: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        Self::build(config, Builder::Create { params, rng })
    }
}
