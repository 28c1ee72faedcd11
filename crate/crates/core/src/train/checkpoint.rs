//! `MMCK` checkpoints.
//!
//! Layout (little-endian): magic `MMCK`, version `u32`, entry count `u32`,
//! then per entry `name_len u32, name, rows u32, cols u32, f64 values`.
//! Entries are the model parameters followed by `adam.m.<name>`,
//! `adam.v.<name>` and the 1×1 `adam.t`. Next comes the sampler generator
//! (32-byte key, `u64` stream, `u128` word position), the completed step
//! `u64`, the epoch cursor `u64` and order (`u64` length plus `u64` indices).
//! Last is a `u32`-prefixed UTF-8 JSON blob `{"model": .., "train": ..}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, Sampler, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamSet;
use crate::rng::RngState;
use crate::tensor::Tensor2D;

const MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Configs {
    model: ModelConfig,
    train: TrainConfig,
}

fn put_u32(buf: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_entry(buf: &mut Vec<u8>, name: &str, t: &Tensor2D) -> Result<()> {
    put_u32(buf, name.len(), "name length")?;
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, t.rows(), "rows")?;
    put_u32(buf, t.cols(), "cols")?;
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

impl Trainer {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = &self.model.params;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut buf, 3 * params.len() + 1, "entry count")?;
        for p in params.iter() {
            put_entry(&mut buf, &p.name, &p.value)?;
        }
        for (prefix, moments) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for (p, t) in params.iter().zip(moments) {
                put_entry(&mut buf, &format!("{prefix}{}", p.name), t)?;
            }
        }
        put_entry(&mut buf, "adam.t", &Tensor2D::full(1, 1, self.adam.t as f64))?;

        let rng = RngState::capture(&self.sampler.rng);
        buf.extend_from_slice(&rng.key);
        buf.extend_from_slice(&rng.stream.to_le_bytes());
        buf.extend_from_slice(&rng.word_pos.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&(self.sampler.cursor as u64).to_le_bytes());
        buf.extend_from_slice(&(self.sampler.order.len() as u64).to_le_bytes());
        for &i in &self.sampler.order {
            buf.extend_from_slice(&(i as u64).to_le_bytes());
        }

        let configs = Configs {
            model: self.model.config().clone(),
            train: self.config.clone(),
        };
        let json = serde_json::to_vec(&configs)?;
        put_u32(&mut buf, json.len(), "config length")?;
        buf.extend_from_slice(&json);
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            entries.push(r.entry()?);
        }
        let key: [u8; 32] = r.take(32, "rng key")?.try_into().expect("32 bytes");
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        let step = r.u64("step")?;
        let cursor = r.u64("cursor")? as usize;
        let order_len = r.u64("order length")? as usize;
        let mut order = Vec::with_capacity(order_len.min(1 << 24));
        for _ in 0..order_len {
            order.push(r.u64("order")? as usize);
        }
        let json_len = r.u32("config length")? as usize;
        let configs: Configs = serde_json::from_slice(r.take(json_len, "config")?)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        if cursor > order.len() {
            return Err(Error::Format(format!("sampler cursor {cursor} past order of {}", order.len())));
        }
        configs.train.validate()?;

        let mut lookup: std::collections::HashMap<String, Tensor2D> = entries.into_iter().collect();
        if lookup.len() != count {
            return Err(Error::Format("duplicate entry names".into()));
        }
        let params = params_from_entries(&configs.model, &mut lookup)?;
        let mut moment = |prefix: &str| -> Result<Vec<Tensor2D>> {
            params
                .iter()
                .map(|p| {
                    let name = format!("{prefix}{}", p.name);
                    let t = lookup.remove(&name).ok_or_else(|| Error::Format(format!("missing entry {name}")))?;
                    if t.shape() != p.value.shape() {
                        return Err(Error::Format(format!("{name} has shape {:?}", t.shape())));
                    }
                    Ok(t)
                })
                .collect()
        };
        let m = moment("adam.m.")?;
        let v = moment("adam.v.")?;
        let t = lookup
            .remove("adam.t")
            .filter(|t| t.shape() == (1, 1))
            .ok_or_else(|| Error::Format("missing entry adam.t".into()))?
            .get(0, 0);
        if let Some(extra) = lookup.keys().next() {
            return Err(Error::Format(format!("unexpected entry {extra}")));
        }
        let adam = AdamState {
            m,
            v,
            t: t as u64,
            beta1: configs.train.adam_beta1,
            beta2: configs.train.adam_beta2,
            eps: configs.train.adam_eps,
        };
        let sampler = Sampler {
            rng: RngState { key, stream, word_pos }.restore(),
            order,
            cursor,
        };
        let model = Model::from_params(configs.model, params)?;
        Ok(Self {
            model,
            adam,
            config: configs.train,
            step,
            sampler,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Model parameters in layout order, removed from `lookup`.
fn params_from_entries(config: &ModelConfig, lookup: &mut std::collections::HashMap<String, Tensor2D>) -> Result<ParamSet> {
    // A fresh build gives the canonical names, order and shapes.
    let template = Model::new(config.clone(), 0)?;
    let mut params = ParamSet::new();
    for p in template.params.iter() {
        let t = lookup
            .remove(&p.name)
            .ok_or_else(|| Error::Format(format!("missing parameter {}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Format(format!(
                "parameter {} has shape {:?}, expected {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        params.add(p.name.clone(), t)?;
    }
    Ok(params)
}

/// Frozen model from a checkpoint, ignoring optimizer state.
pub fn load_model(path: &Path) -> Result<Model> {
    Ok(Trainer::load(path)?.model)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated checkpoint while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn entry(&mut self) -> Result<(String, Tensor2D)> {
        let len = self.u32("name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_owned();
        let rows = self.u32("rows")? as usize;
        let cols = self.u32("cols")? as usize;
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(8));
        let raw = self.take(n.ok_or_else(|| Error::Format(format!("{name}: {rows}×{cols} overflows")))?, &name)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((name, Tensor2D::from_vec(rows, cols, values)?))
    }
}
