//! Flat run configuration shared by the command-line workflows.
//!
//! A run starts from a profile's defaults, then applies the keys of a JSON
//! file, then explicit overrides. Unknown keys and ill-typed values are
//! rejected with the offending key named.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::{Metric, Modalities};
use crate::model::{Architecture, DynamicCoupling, InputDims, ModelConfig, RoutingKind};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            _ => Err(Error::config("profile", format!("expected desk or paper, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,

    #[serde(rename = "C")]
    pub num_capsules: usize,
    pub d1: usize,
    pub d2: usize,
    #[serde(rename = "D")]
    pub embed_dim: usize,
    pub heads: usize,
    pub hidden_mlp: usize,
    pub dropout_p: f64,
    pub routing: RoutingKind,
    pub routing_iters: usize,
    pub share_weights: bool,
    pub architecture: Architecture,
    pub attention_groups: usize,
    pub dynamic_coupling: DynamicCoupling,
    pub em_detach_assignments: bool,

    pub lr0: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub delta: f64,
    pub eval_every: u64,
    pub clip_norm: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    pub n_concepts: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub dim_video: usize,
    pub dim_audio: usize,
    pub dim_text: usize,
    pub noise_sigma: f64,
    pub cross_modal_offset_sigma: f64,
    pub clips_per_video: usize,
    pub shared_latent_dim: usize,
    /// Directory of `MMCF` training features; synthetic data when absent.
    pub train_dir: Option<PathBuf>,
    /// Directory of `MMCF` held-out features; used with `train_dir`.
    pub test_dir: Option<PathBuf>,

    pub metric: Metric,
    pub modalities: Modalities,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (model, train, data) = match profile {
            Profile::Desk => (ModelConfig::desk(), TrainConfig::desk(), SyntheticSpec::default()),
            Profile::Paper => (
                ModelConfig::default(),
                TrainConfig::paper(),
                SyntheticSpec {
                    dims: ModelConfig::default().input_dims,
                    n_train: 16 * TrainConfig::paper().batch_size,
                    ..SyntheticSpec::default()
                },
            ),
        };
        Self {
            profile,
            num_capsules: model.num_capsules,
            d1: model.primary_dim,
            d2: model.secondary_dim,
            embed_dim: model.embed_dim,
            heads: model.heads,
            hidden_mlp: model.hidden_mlp,
            dropout_p: model.dropout_p,
            routing: model.routing,
            routing_iters: model.routing_iters,
            share_weights: model.share_weights,
            architecture: model.architecture,
            attention_groups: model.attention_groups,
            dynamic_coupling: model.dynamic_coupling,
            em_detach_assignments: model.em_detach_assignments,
            lr0: train.lr0,
            total_steps: train.total_steps,
            batch_size: train.batch_size,
            seed: train.seed,
            delta: train.delta,
            eval_every: train.eval_every,
            clip_norm: train.clip_norm,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_eps: train.adam_eps,
            n_concepts: data.n_concepts,
            n_train: data.n_train,
            n_test: data.n_test,
            dim_video: data.dims.video,
            dim_audio: data.dims.audio,
            dim_text: data.dims.text,
            noise_sigma: data.noise_sigma,
            cross_modal_offset_sigma: data.cross_modal_offset_sigma,
            clips_per_video: data.clips_per_video,
            shared_latent_dim: data.shared_latent_dim,
            train_dir: None,
            test_dir: None,
            metric: Metric::default(),
            modalities: Modalities::Vt,
        }
    }

    /// Profile defaults, then `file` keys, then `overrides`, then validation.
    pub fn resolve(file: Option<&str>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut layers: Vec<(String, Value)> = Vec::new();
        if let Some(text) = file {
            let value: Value =
                serde_json::from_str(text).map_err(|e| Error::config("<file>", format!("invalid JSON: {e}")))?;
            let Value::Object(map) = value else {
                return Err(Error::config("<file>", "top level must be a JSON object"));
            };
            layers.extend(map);
        }
        layers.extend(overrides.iter().cloned());

        let profile = match layers.iter().rev().find(|(k, _)| k == "profile") {
            Some((_, v)) => v
                .as_str()
                .ok_or_else(|| Error::config("profile", "must be a string"))?
                .parse()?,
            None => Profile::Desk,
        };
        let Value::Object(mut merged) = serde_json::to_value(Self::for_profile(profile))? else {
            unreachable!("struct serializes to an object")
        };
        for (key, value) in layers {
            set_key(&mut merged, &key, value)?;
        }
        let config: Self = serde_json::from_value(Value::Object(merged))
            .map_err(|e| Error::config("<config>", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn input_dims(&self) -> InputDims {
        InputDims {
            video: self.dim_video,
            audio: self.dim_audio,
            text: self.dim_text,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_capsules: self.num_capsules,
            primary_dim: self.d1,
            secondary_dim: self.d2,
            embed_dim: self.embed_dim,
            heads: self.heads,
            hidden_mlp: self.hidden_mlp,
            dropout_p: self.dropout_p,
            input_dims: self.input_dims(),
            routing: self.routing,
            routing_iters: self.routing_iters,
            share_weights: self.share_weights,
            architecture: self.architecture,
            attention_groups: self.attention_groups,
            dynamic_coupling: self.dynamic_coupling,
            em_detach_assignments: self.em_detach_assignments,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            seed: self.seed,
            delta: self.delta,
            eval_every: self.eval_every,
            checkpoint_path: None,
            clip_norm: self.clip_norm,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_concepts: self.n_concepts,
            n_train: self.n_train,
            n_test: self.n_test,
            dims: self.input_dims(),
            noise_sigma: self.noise_sigma,
            cross_modal_offset_sigma: self.cross_modal_offset_sigma,
            clips_per_video: self.clips_per_video,
            shared_latent_dim: self.shared_latent_dim,
            seed: self.seed,
        }
    }

    /// Checks every module's invariants before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.train_dir.is_none() {
            self.synthetic_spec().validate()?;
            if self.n_train < self.batch_size {
                return Err(Error::config(
                    "n_train",
                    format!("{} is smaller than batch_size {}", self.n_train, self.batch_size),
                ));
            }
        }
        if self.test_dir.is_some() && self.train_dir.is_none() {
            return Err(Error::config("test_dir", "requires train_dir"));
        }
        Ok(())
    }
}

/// Sets `key`, checking it exists and that the new value has a usable type.
fn set_key(merged: &mut Map<String, Value>, key: &str, value: Value) -> Result<()> {
    let Some(slot) = merged.get_mut(key) else {
        return Err(Error::config(key, "unknown key"));
    };
    let old = std::mem::replace(slot, value);
    if let Err(e) = serde_json::from_value::<RunConfig>(Value::Object(merged.clone())) {
        merged.insert(key.to_owned(), old);
        return Err(Error::config(key, e.to_string()));
    }
    Ok(())
}

/// Parses a `key=value` override. The value is read as JSON, or as a
/// plain string when it is not valid JSON.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::config(text, "override must look like key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((key.trim().to_owned(), value))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(e: Error) -> String {
        match e {
            Error::Config { key, .. } => key,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn defaults_round_trip_through_the_flat_form() {
        let c = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(c, RunConfig::for_profile(Profile::Desk));
        assert_eq!(c.model_config(), ModelConfig::desk());
        assert_eq!(c.train_config(), TrainConfig::desk());
        assert_eq!(c.synthetic_spec(), SyntheticSpec::default());
    }

    #[test]
    fn precedence_is_overrides_then_file_then_defaults() {
        let file = r#"{"total_steps": 20, "seed": 4, "routing": "dynamic"}"#;
        let c = RunConfig::resolve(Some(file), &[("seed".into(), Value::from(9))]).unwrap();
        assert_eq!((c.total_steps, c.seed, c.routing), (20, 9, RoutingKind::Dynamic));
        assert_eq!(c.batch_size, 64);
    }

    #[test]
    fn profile_selects_defaults() {
        let c = RunConfig::resolve(Some(r#"{"profile": "paper"}"#), &[]);
        // Paper scale is valid, only expensive.
        let c = c.unwrap();
        assert_eq!((c.num_capsules, c.batch_size, c.dim_video), (128, 4096, 4096));
    }

    #[test]
    fn errors_name_the_key() {
        let cases = [
            (r#"{"bogus": 1}"#, "bogus"),
            (r#"{"C": "eight"}"#, "C"),
            (r#"{"batch_size": 1}"#, "batch_size"),
            (r#"{"total_steps": 0}"#, "total_steps"),
            (r#"{"d2": 15}"#, "heads"),
            (r#"{"n_concepts": 1}"#, "n_concepts"),
            (r#"{"n_train": 10}"#, "n_train"),
            (r#"{"profile": "huge"}"#, "profile"),
            (r#"[1]"#, "<file>"),
        ];
        for (file, key) in cases {
            assert_eq!(key_of(RunConfig::resolve(Some(file), &[]).unwrap_err()), key, "{file}");
        }
    }

    #[test]
    fn override_parsing() {
        assert_eq!(parse_override("seed=3").unwrap(), ("seed".into(), Value::from(3)));
        assert_eq!(parse_override("routing=dynamic").unwrap().1, Value::from("dynamic"));
        assert_eq!(parse_override("clip_norm=null").unwrap().1, Value::Null);
        assert!(parse_override("seed").is_err());
    }
}
