//! Training loop: epoch sampling, contrastive loss, clipped Adam with a
//! cosine schedule, metrics and resumable checkpoints.

mod adam;
mod checkpoint;

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{total_loss_on_tape, DEFAULT_DELTA};
use crate::model::{Modality, Model, ModelConfig};
use crate::ops::Mode;
use crate::rng::{self, streams, Rng};
use crate::tape::Tape;

pub use adam::{adam_step, clip_grad_norm, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS};
pub use checkpoint::{load_model, CHECKPOINT_VERSION};

fn default_clip() -> Option<f64> {
    Some(5.0)
}

fn default_beta1() -> f64 {
    DEFAULT_BETA1
}

fn default_beta2() -> f64 {
    DEFAULT_BETA2
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub delta: f64,
    /// A metrics record is emitted every `eval_every` steps and at the last step.
    pub eval_every: u64,
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
    /// Global gradient-norm cap; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
}

impl TrainConfig {
    /// Settings for a laptop-scale run.
    pub fn desk() -> Self {
        Self {
            lr0: 1e-3,
            total_steps: 300,
            batch_size: 64,
            seed: 0,
            delta: DEFAULT_DELTA,
            eval_every: 10,
            checkpoint_path: None,
            clip_norm: default_clip(),
            adam_beta1: DEFAULT_BETA1,
            adam_beta2: DEFAULT_BETA2,
            adam_eps: DEFAULT_EPS,
        }
    }

    /// Published large-scale batch size; not runnable on a desk machine.
    pub fn paper() -> Self {
        Self {
            batch_size: 4096,
            total_steps: 5860,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr0", format!("must be positive, got {}", self.lr0)));
        }
        if self.total_steps < 1 {
            return Err(Error::config("total_steps", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2 so every batch has imposters"));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::config("delta", format!("must be a finite value >= 0, got {}", self.delta)));
        }
        if self.eval_every < 1 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("clip_norm", format!("must be positive, got {c}")));
            }
        }
        for (key, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        Ok(())
    }
}

/// `lr0 · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Range(format!("step {step} beyond schedule of {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: f64,
}

/// Epoch sampler without replacement. A tail shorter than the batch is
/// dropped and the next epoch is reshuffled.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Sampler {
    pub(crate) rng: Rng,
    pub(crate) order: Vec<usize>,
    pub(crate) cursor: usize,
}

impl Sampler {
    fn new(seed: u64) -> Self {
        Self {
            rng: rng::stream(seed, streams::SAMPLER),
            order: Vec::new(),
            cursor: 0,
        }
    }

    fn next_batch(&mut self, n: usize, batch: usize) -> Vec<usize> {
        if self.order.len() != n || self.cursor + batch > n {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + batch].to_vec();
        self.cursor += batch;
        out
    }
}

/// Complete training state; everything a resumed run needs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub config: TrainConfig,
    step: u64,
    pub(crate) sampler: Sampler,
}

impl Trainer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config, config.seed)?;
        let adam = AdamState::new(&model.params, config.adam_beta1, config.adam_beta2, config.adam_eps);
        let sampler = Sampler::new(config.seed);
        Ok(Self { model, adam, config, step: 0, sampler })
    }

    /// Steps completed so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.total_steps
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.len() < self.config.batch_size {
            return Err(Error::config(
                "batch_size",
                format!("{} exceeds the {} available training triples", self.config.batch_size, data.len()),
            ));
        }
        let want = self.model.config().input_dims;
        if data.dims() != want {
            return Err(Error::config(
                "input_dims",
                format!("model expects {want:?}, data has {:?}", data.dims()),
            ));
        }
        Ok(())
    }

    /// Runs one optimization step and returns the learning rate used and the
    /// batch loss before the update.
    pub fn step(&mut self, data: &Dataset) -> Result<(f64, f64)> {
        if self.is_finished() {
            return Err(Error::Range(format!("all {} steps already taken", self.config.total_steps)));
        }
        self.check_data(data)?;
        let lr = cosine_lr(self.step, self.config.total_steps, self.config.lr0)?;
        let indices = self.sampler.next_batch(data.len(), self.config.batch_size);
        let batch = data.select(&indices)?;

        let net = &self.model.net;
        let params = &self.model.params;
        let mut tape = Tape::new();
        let mut dropout = rng::stream(self.config.seed, streams::DROPOUT_BASE + self.step + 1);
        let mut embed = |m: Modality| {
            let x = tape.constant(batch.get(m).clone());
            net.embed_on_tape(&mut tape, params, x, m, Mode::Train, &mut dropout)
        };
        let (v, a, t) = (embed(Modality::Video)?, embed(Modality::Audio)?, embed(Modality::Text)?);
        let loss = total_loss_on_tape(&mut tape, v, a, t, self.config.delta)?;
        let value = tape.scalar(loss);
        tape.backward_into(loss, &mut self.model.params)?;
        if let Some(c) = self.config.clip_norm {
            clip_grad_norm(&mut self.model.params, c);
        }
        adam_step(&mut self.model.params, &mut self.adam, lr)?;
        self.step += 1;
        Ok((lr, value))
    }

    /// Trains until `total_steps`, calling `on_record` at every metrics
    /// point, then writes the checkpoint if a path is configured.
    pub fn run(&mut self, data: &Dataset, mut on_record: impl FnMut(&MetricRecord) -> Result<()>) -> Result<Vec<f64>> {
        self.check_data(data)?;
        let start = Instant::now();
        let mut losses = Vec::with_capacity((self.config.total_steps - self.step.min(self.config.total_steps)) as usize);
        while !self.is_finished() {
            let (lr, loss) = self.step(data)?;
            losses.push(loss);
            if self.step % self.config.eval_every == 0 || self.is_finished() {
                let record = MetricRecord {
                    step: self.step,
                    lr,
                    loss,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                };
                on_record(&record)?;
            }
        }
        if let Some(path) = self.config.checkpoint_path.clone() {
            self.save(&path)?;
        }
        Ok(losses)
    }

    /// Loss of `indices` under the current parameters, evaluation mode.
    pub fn eval_loss(&self, data: &Dataset, indices: &[usize]) -> Result<f64> {
        let batch = data.select(indices)?;
        let [v, a, t] = [Modality::Video, Modality::Audio, Modality::Text].map(|m| self.model.embed(batch.get(m), m));
        crate::loss::total_loss(&v?, &a?, &t?, self.config.delta)
    }
}
