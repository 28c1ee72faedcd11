use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input modality of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Video, Modality::Audio, Modality::Text];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Tag byte used in feature files.
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("modality", format!("unknown modality `{s}`")))
    }
}

/// How primary capsules are turned into secondary capsules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingKind {
    SelfAttention,
    Dynamic,
    Em,
    SetTransformer,
    None,
}

impl RoutingKind {
    pub const ALL: [RoutingKind; 5] = [
        RoutingKind::SelfAttention,
        RoutingKind::Dynamic,
        RoutingKind::Em,
        RoutingKind::SetTransformer,
        RoutingKind::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RoutingKind::SelfAttention => "self_attention",
            RoutingKind::Dynamic => "dynamic",
            RoutingKind::Em => "em",
            RoutingKind::SetTransformer => "set_transformer",
            RoutingKind::None => "none",
        }
    }

    pub fn is_iterative(self) -> bool {
        matches!(self, RoutingKind::Dynamic | RoutingKind::Em)
    }
}

impl fmt::Display for RoutingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoutingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::config("routing", format!("unknown routing kind `{s}`")))
    }
}

/// Overall network family. The two non-capsule variants are comparison baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    Capsule,
    /// Two fully connected layers.
    Fc,
    /// Features split into `attention_groups` rows and passed through one
    /// self-attention block, no capsule activations.
    PlainAttention,
}

/// Which index the dynamic-routing coupling softmax normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicCoupling {
    /// Each output capsule's couplings over the input capsules sum to one.
    #[default]
    Inputs,
    /// Each input capsule's couplings over the output capsules sum to one.
    Outputs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDims {
    pub video: usize,
    pub audio: usize,
    pub text: usize,
}

impl InputDims {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Video => self.video,
            Modality::Audio => self.audio,
            Modality::Text => self.text,
        }
    }

    pub fn uniform(dim: usize) -> Self {
        Self {
            video: dim,
            audio: dim,
            text: dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Capsule count `C`.
    #[serde(rename = "C")]
    pub num_capsules: usize,
    /// Primary pose width `d1`.
    #[serde(rename = "d1")]
    pub primary_dim: usize,
    /// Secondary pose width `d2`.
    #[serde(rename = "d2")]
    pub secondary_dim: usize,
    /// Joint embedding width `D`.
    #[serde(rename = "D")]
    pub embed_dim: usize,
    pub heads: usize,
    pub hidden_mlp: usize,
    pub dropout_p: f64,
    pub input_dims: InputDims,
    pub routing: RoutingKind,
    pub routing_iters: usize,
    pub share_weights: bool,
    #[serde(default)]
    pub architecture: Architecture,
    /// Row count for the plain-attention baseline.
    #[serde(default = "default_attention_groups")]
    pub attention_groups: usize,
    #[serde(default)]
    pub dynamic_coupling: DynamicCoupling,
    /// Treat EM assignment probabilities as constants during backward.
    #[serde(default)]
    pub em_detach_assignments: bool,
}

fn default_attention_groups() -> usize {
    128
}

impl Default for ModelConfig {
    /// Full-size settings: `C=128, d1=32, d2=256, D=4096`, 4096-d inputs.
    fn default() -> Self {
        Self {
            num_capsules: 128,
            primary_dim: 32,
            secondary_dim: 256,
            embed_dim: 4096,
            heads: 4,
            hidden_mlp: 1024,
            dropout_p: 0.1,
            input_dims: InputDims::uniform(4096),
            routing: RoutingKind::SelfAttention,
            routing_iters: 3,
            share_weights: true,
            architecture: Architecture::Capsule,
            attention_groups: default_attention_groups(),
            dynamic_coupling: DynamicCoupling::Inputs,
            em_detach_assignments: false,
        }
    }
}

impl ModelConfig {
    /// Small settings used for laptop-scale runs.
    pub fn desk() -> Self {
        Self {
            num_capsules: 8,
            primary_dim: 8,
            secondary_dim: 16,
            embed_dim: 32,
            heads: 2,
            hidden_mlp: 64,
            dropout_p: 0.1,
            input_dims: InputDims {
                video: 64,
                audio: 48,
                text: 32,
            },
            attention_groups: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d1", self.primary_dim),
            ("d2", self.secondary_dim),
            ("D", self.embed_dim),
            ("heads", self.heads),
            ("hidden_mlp", self.hidden_mlp),
            ("input_dims.video", self.input_dims.video),
            ("input_dims.audio", self.input_dims.audio),
            ("input_dims.text", self.input_dims.text),
        ];
        for (key, value) in positive {
            if value < 1 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.num_capsules < 2 {
            return Err(Error::config("C", format!("must be at least 2, got {}", self.num_capsules)));
        }
        if self.secondary_dim % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("d2 = {} is not divisible by {} heads", self.secondary_dim, self.heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("dropout_p", format!("must lie in [0, 1), got {}", self.dropout_p)));
        }
        if self.architecture == Architecture::Capsule {
            if self.routing.is_iterative() && self.routing_iters < 1 {
                return Err(Error::config("routing_iters", "must be at least 1"));
            }
            if self.routing == RoutingKind::Em {
                if self.primary_dim != self.secondary_dim {
                    return Err(Error::config(
                        "d2",
                        format!(
                            "em routing needs matrix capsules with d1 = d2, got {} and {}",
                            self.primary_dim, self.secondary_dim
                        ),
                    ));
                }
                if perfect_square_root(self.primary_dim).is_none() {
                    return Err(Error::config(
                        "d1",
                        format!("em routing needs a square pose size, got {}", self.primary_dim),
                    ));
                }
            }
        }
        if self.architecture == Architecture::PlainAttention {
            if self.attention_groups < 1 {
                return Err(Error::config("attention_groups", "must be at least 1"));
            }
            for m in Modality::ALL {
                let dim = self.input_dims.get(m);
                if dim % self.attention_groups != 0 {
                    return Err(Error::config(
                        "attention_groups",
                        format!("{m} input width {dim} is not divisible by {}", self.attention_groups),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Side of the square pose matrix used by EM routing.
    pub fn matrix_side(&self) -> Option<usize> {
        perfect_square_root(self.primary_dim)
    }
}

pub(crate) fn perfect_square_root(n: usize) -> Option<usize> {
    let root = (n as f64).sqrt().round() as usize;
    (root * root == n && n > 0).then_some(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn invariant_violations_name_their_key() {
        let cases: Vec<(ModelConfig, &str)> = vec![
            (ModelConfig { heads: 3, ..ModelConfig::desk() }, "heads"),
            (ModelConfig { num_capsules: 1, ..ModelConfig::desk() }, "C"),
            (ModelConfig { embed_dim: 0, ..ModelConfig::desk() }, "D"),
            (ModelConfig { dropout_p: 1.0, ..ModelConfig::desk() }, "dropout_p"),
            (
                ModelConfig { routing: RoutingKind::Em, ..ModelConfig::desk() },
                "d2",
            ),
            (
                ModelConfig {
                    routing: RoutingKind::Em,
                    primary_dim: 8,
                    secondary_dim: 8,
                    ..ModelConfig::desk()
                },
                "d1",
            ),
            (
                ModelConfig {
                    routing: RoutingKind::Dynamic,
                    routing_iters: 0,
                    ..ModelConfig::desk()
                },
                "routing_iters",
            ),
            (
                ModelConfig {
                    architecture: Architecture::PlainAttention,
                    attention_groups: 5,
                    ..ModelConfig::desk()
                },
                "attention_groups",
            ),
        ];
        for (cfg, key) in cases {
            match cfg.validate() {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key),
                other => panic!("expected config error for {key}, got {other:?}"),
            }
        }
    }

    #[test]
    fn em_accepts_square_matrix_capsules() {
        let cfg = ModelConfig {
            routing: RoutingKind::Em,
            primary_dim: 16,
            secondary_dim: 16,
            heads: 2,
            ..ModelConfig::desk()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.matrix_side(), Some(4));
    }

    #[test]
    fn names_round_trip() {
        for r in RoutingKind::ALL {
            assert_eq!(r.name().parse::<RoutingKind>().unwrap(), r);
        }
        for m in Modality::ALL {
            assert_eq!(Modality::from_tag(m.tag()), Some(m));
        }
        let json = serde_json::to_string(&ModelConfig::desk()).unwrap();
        assert!(json.contains("\"C\":8"));
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ModelConfig::desk());
    }
}
