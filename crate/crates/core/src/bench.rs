//! Wall-time and peak tensor memory of one training step per routing setup.
//!
//! Memory is the high-water mark of live tensor bytes above the baseline
//! held before the step, from the allocation counter in
//! [`crate::tensor::alloc_stats`]. It is deterministic for a fixed config
//! and seed. Timing covers forward, loss and backward, not data creation.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::standard_normal;
use crate::error::{Error, Result};
use crate::loss::{total_loss_on_tape, DEFAULT_DELTA};
use crate::model::{InputDims, Modality, Model, ModelConfig, RoutingKind};
use crate::ops::Mode;
use crate::rng::{self, streams};
use crate::tape::Tape;
use crate::tensor::{alloc_stats, Tensor2D};

pub const BENCH_EMBED_DIM: usize = 64;
pub const BENCH_INPUT_DIM: usize = 64;

/// One point of a benchmark grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub routing: RoutingKind,
    #[serde(rename = "C")]
    pub num_capsules: usize,
    pub d1: usize,
    pub d2: usize,
    #[serde(default = "default_iters")]
    pub iters: usize,
}

fn default_iters() -> usize {
    3
}

impl GridPoint {
    /// Model used to benchmark this point: the most heads in {4, 2, 1}
    /// that divide `d2`, a 4·d2 hidden layer, 64-d inputs and embedding.
    pub fn model_config(&self) -> ModelConfig {
        let heads = [4, 2, 1].into_iter().find(|h| self.d2 % h == 0).unwrap_or(1);
        ModelConfig {
            num_capsules: self.num_capsules,
            primary_dim: self.d1,
            secondary_dim: self.d2,
            embed_dim: BENCH_EMBED_DIM,
            heads,
            hidden_mlp: 4 * self.d2,
            input_dims: InputDims::uniform(BENCH_INPUT_DIM),
            routing: self.routing,
            routing_iters: self.iters,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub batch: usize,
    pub repeats: usize,
    pub warmups: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { batch: 64, repeats: 5, warmups: 2, seed: 0 }
    }
}

impl BenchOptions {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 5 {
            return Err(Error::config("repeats", "must be at least 5"));
        }
        if self.warmups < 2 {
            return Err(Error::config("warmups", "must be at least 2"));
        }
        if self.batch < 2 {
            return Err(Error::config("batch", "must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub routing: RoutingKind,
    #[serde(rename = "C")]
    pub num_capsules: usize,
    pub d1: usize,
    pub d2: usize,
    pub iters: usize,
    pub batch: usize,
    pub ms_mean: f64,
    pub ms_std: f64,
    pub ms_median: f64,
    pub peak_bytes: usize,
}

/// One forward, loss and backward pass; returns the loss.
fn train_pass(model: &Model, inputs: &[Tensor2D; 3], seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let mut dropout = rng::stream(seed, streams::DROPOUT_BASE);
    let mut embed = |m: Modality| {
        let x = tape.constant(inputs[m.index()].clone());
        model.net.embed_on_tape(&mut tape, &model.params, x, m, Mode::Train, &mut dropout)
    };
    let (v, a, t) = (embed(Modality::Video)?, embed(Modality::Audio)?, embed(Modality::Text)?);
    let loss = total_loss_on_tape(&mut tape, v, a, t, DEFAULT_DELTA)?;
    let grads = tape.backward(loss)?;
    drop(grads);
    Ok(tape.scalar(loss))
}

/// Times one grid point.
pub fn bench_point(point: &GridPoint, opts: &BenchOptions) -> Result<BenchRow> {
    opts.validate()?;
    let config = point.model_config();
    let model = Model::new(config, opts.seed)?;
    let mut data_rng = rng::stream(opts.seed, streams::BENCH);
    let inputs = [0, 1, 2].map(|_| standard_normal(opts.batch, BENCH_INPUT_DIM, &mut data_rng));

    for _ in 0..opts.warmups {
        std::hint::black_box(train_pass(&model, &inputs, opts.seed)?);
    }
    let mut times = Vec::with_capacity(opts.repeats);
    let mut peak_bytes = 0;
    for rep in 0..opts.repeats {
        let base = alloc_stats::live_bytes();
        alloc_stats::reset_peak();
        let start = Instant::now();
        std::hint::black_box(train_pass(&model, &inputs, opts.seed)?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
        if rep == 0 {
            peak_bytes = alloc_stats::peak_bytes() - base;
        }
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0);
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
    };
    Ok(BenchRow {
        routing: point.routing,
        num_capsules: point.num_capsules,
        d1: point.d1,
        d2: point.d2,
        iters: point.iters,
        batch: opts.batch,
        ms_mean: mean,
        ms_std: var.sqrt(),
        ms_median: median,
        peak_bytes,
    })
}

/// Benchmarks each point in turn on the calling thread.
pub fn bench_routing(grid: &[GridPoint], opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    opts.validate()?;
    grid.iter().map(|p| bench_point(p, opts)).collect()
}

pub const CSV_HEADER: &str = "routing,C,d1,d2,iters,batch,ms_mean,ms_std,peak_bytes";

pub fn write_csv(rows: &[BenchRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{:.4},{:.4},{}",
            r.routing, r.num_capsules, r.d1, r.d2, r.iters, r.batch, r.ms_mean, r.ms_std, r.peak_bytes
        )?;
    }
    Ok(())
}

/// Writes `path` as CSV and the same rows as JSON next to it.
pub fn write_reports(rows: &[BenchRow], csv_path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(csv_path)?);
    write_csv(rows, &mut f)?;
    f.flush()?;
    std::fs::write(csv_path.with_extension("json"), serde_json::to_vec_pretty(rows)?)?;
    Ok(())
}

/// Reads a grid file: a JSON array of points.
pub fn read_grid(path: &Path) -> Result<Vec<GridPoint>> {
    let text = std::fs::read_to_string(path)?;
    let grid: Vec<GridPoint> =
        serde_json::from_str(&text).map_err(|e| Error::config("grid", e.to_string()))?;
    if grid.is_empty() {
        return Err(Error::config("grid", "contains no points"));
    }
    for p in &grid {
        p.model_config().validate()?;
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(routing: RoutingKind, iters: usize) -> GridPoint {
        GridPoint { routing, num_capsules: 4, d1: 4, d2: 8, iters }
    }

    fn quick() -> BenchOptions {
        BenchOptions { batch: 4, ..BenchOptions::default() }
    }

    #[test]
    fn head_choice() {
        let mut p = point(RoutingKind::SelfAttention, 1);
        assert_eq!(p.model_config().heads, 4);
        p.d2 = 6;
        assert_eq!(p.model_config().heads, 2);
        p.d2 = 5;
        assert_eq!(p.model_config().heads, 1);
    }

    #[test]
    fn allocation_is_deterministic() {
        let p = point(RoutingKind::Dynamic, 3);
        let a = bench_point(&p, &quick()).unwrap();
        let b = bench_point(&p, &quick()).unwrap();
        assert_eq!(a.peak_bytes, b.peak_bytes);
        assert!(a.ms_mean > 0.0 && a.peak_bytes > 0);
    }

    #[test]
    fn more_dynamic_iterations_allocate_more() {
        let one = bench_point(&point(RoutingKind::Dynamic, 1), &quick()).unwrap();
        let three = bench_point(&point(RoutingKind::Dynamic, 3), &quick()).unwrap();
        assert!(three.peak_bytes > one.peak_bytes, "{} vs {}", three.peak_bytes, one.peak_bytes);
    }

    #[test]
    fn options_are_validated() {
        let p = [point(RoutingKind::None, 1)];
        assert!(bench_routing(&p, &BenchOptions { repeats: 4, ..quick() }).is_err());
        assert!(bench_routing(&p, &BenchOptions { warmups: 1, ..quick() }).is_err());
    }

    #[test]
    fn csv_has_one_line_per_row() {
        let grid = [point(RoutingKind::None, 1), point(RoutingKind::SetTransformer, 1)];
        let rows = bench_routing(&grid, &quick()).unwrap();
        let mut out = Vec::new();
        write_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("set_transformer,4,4,8,1,4,"));
    }
}
