//! Zero-shot retrieval, temporal localization and the capsule inspector.
//!
//! Work over independent rows is sharded across scoped threads. The thread
//! count defaults to the available parallelism and is capped by
//! `MMCAPS_THREADS`. Results are merged by index, so output never depends
//! on the thread count.

mod localization;
mod retrieval;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Modality, Model};
use crate::tensor::Tensor2D;

pub use localization::{iod_iou, localization_recall, localize, segments_from_labels, Overlap, Segment};
pub use retrieval::{median, ranks, report_from_ranks, retrieval_metrics, Metric, RetrievalReport, DEFAULT_KS};

/// Worker count for evaluation.
pub fn thread_count() -> usize {
    let available = std::thread::available_parallelism().map_or(1, usize::from);
    match std::env::var("MMCAPS_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(cap) if cap >= 1 => available.min(cap),
        _ => available,
    }
}

/// `(0..n).map(f)` evaluated on up to [`thread_count`] threads.
pub(crate) fn parallel_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = thread_count().min(n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| scope.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect::<Vec<T>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
    })
}

/// Elementwise mean of a video and an audio embedding.
pub fn fuse_video_audio(video: &[f64], audio: &[f64]) -> Result<Vec<f64>> {
    if video.len() != audio.len() {
        return Err(Error::shape("fuse_video_audio", (1, video.len()), (1, audio.len())));
    }
    Ok(video.iter().zip(audio).map(|(v, a)| (v + a) / 2.0).collect())
}

/// [`fuse_video_audio`] applied row by row.
pub fn fuse_rows(video: &Tensor2D, audio: &Tensor2D) -> Result<Tensor2D> {
    video.zip_map(audio, |v, a| (v + a) / 2.0)
}

/// The `k` samples with the largest activation of `capsule`, descending,
/// ties by index.
pub fn top_activating(activations: &Tensor2D, capsule: usize, k: usize) -> Result<Vec<usize>> {
    if capsule >= activations.cols() {
        return Err(Error::Range(format!("capsule {capsule} of {}", activations.cols())));
    }
    if k > activations.rows() {
        return Err(Error::Range(format!("top {k} of {} samples", activations.rows())));
    }
    let mut idx: Vec<usize> = (0..activations.rows()).collect();
    idx.sort_by(|&a, &b| {
        activations
            .get(b, capsule)
            .total_cmp(&activations.get(a, capsule))
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

/// Embeds every row of `feats`, sharding row blocks across threads.
pub fn embed_all(model: &Model, feats: &Tensor2D, m: Modality) -> Result<Tensor2D> {
    const BLOCK: usize = 64;
    let n = feats.rows();
    let blocks = parallel_map(n.div_ceil(BLOCK), |b| {
        let rows: Vec<usize> = (b * BLOCK..((b + 1) * BLOCK).min(n)).collect();
        let x = Tensor2D::from_fn(rows.len(), feats.cols(), |r, c| feats.get(rows[r], c));
        model.embed(&x, m)
    });
    let mut data = Vec::with_capacity(n * model.config().embed_dim);
    for b in blocks {
        data.extend_from_slice(b?.data());
    }
    Tensor2D::from_vec(n, model.config().embed_dim, data)
}

/// Which modalities form the video side of a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modalities {
    /// Text against video.
    Vt,
    /// Text against the fused video and audio embedding.
    Vat,
}

impl std::str::FromStr for Modalities {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vt" => Ok(Self::Vt),
            "vat" => Ok(Self::Vat),
            _ => Err(Error::config("modalities", format!("expected vt or vat, got {s:?}"))),
        }
    }
}

/// Serialized evaluation output; metrics a task does not produce are null.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r1: Option<f64>,
    pub r5: Option<f64>,
    pub r10: Option<f64>,
    pub medr: Option<f64>,
    pub recall: Option<f64>,
    pub iod: Option<f64>,
    pub iou: Option<f64>,
}

impl From<&RetrievalReport> for EvalReport {
    fn from(r: &RetrievalReport) -> Self {
        Self {
            r1: r.r_at.get(&1).copied(),
            r5: r.r_at.get(&5).copied(),
            r10: r.r_at.get(&10).copied(),
            medr: Some(r.med_r),
            ..Self::default()
        }
    }
}

fn video_side(model: &Model, data: &Dataset, modalities: Modalities) -> Result<Tensor2D> {
    let video = embed_all(model, &data.video, Modality::Video)?;
    match modalities {
        Modalities::Vt => Ok(video),
        Modalities::Vat => fuse_rows(&video, &embed_all(model, &data.audio, Modality::Audio)?),
    }
}

/// Text→video retrieval over `data`, row `i` of each modality forming a pair.
pub fn evaluate_retrieval(model: &Model, data: &Dataset, modalities: Modalities, metric: Metric) -> Result<RetrievalReport> {
    let text = embed_all(model, &data.text, Modality::Text)?;
    let video = video_side(model, data, modalities)?;
    retrieval_metrics(&text, &video, &DEFAULT_KS, metric)
}

/// Localization over `data` read as one long sequence of time-steps.
///
/// Each concept's action query is the mean text embedding of its clips;
/// unlabeled steps are ignored.
pub fn evaluate_localization(model: &Model, data: &Dataset, modalities: Modalities) -> Result<EvalReport> {
    let labels: Vec<Option<usize>> = data.labels.iter().map(|l| l.map(|l| l as usize)).collect();
    let n_actions = labels.iter().flatten().max().map(|m| m + 1).ok_or(Error::Empty("labeled time-steps"))?;
    let text = embed_all(model, &data.text, Modality::Text)?;
    let d = text.cols();
    let mut actions = Tensor2D::zeros(n_actions, d);
    let mut counts = vec![0usize; n_actions];
    for (t, l) in labels.iter().enumerate() {
        if let Some(l) = *l {
            counts[l] += 1;
            for (a, x) in actions.row_mut(l).iter_mut().zip(text.row(t)) {
                *a += x;
            }
        }
    }
    for (l, &c) in counts.iter().enumerate() {
        if c > 0 {
            for a in actions.row_mut(l) {
                *a /= c as f64;
            }
        } else {
            // No clip describes this action; keep it out of reach.
            actions.row_mut(l).fill(f64::INFINITY);
        }
    }
    let video = video_side(model, data, modalities)?;
    let pred = localize(&video, &actions)?;
    let gt = segments_from_labels(&labels);
    let pred_segments = segments_from_labels(&pred.iter().map(|&p| Some(p)).collect::<Vec<_>>());
    let overlap = iod_iou(&gt, &pred_segments)?;
    Ok(EvalReport {
        recall: Some(localization_recall(&gt, &pred)?),
        iod: Some(overlap.iod),
        iou: Some(overlap.iou),
        ..EvalReport::default()
    })
}

/// Top samples for one capsule with their labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapsuleSummary {
    pub capsule: usize,
    pub samples: Vec<usize>,
    pub labels: Vec<Option<u32>>,
    /// Share of labeled top samples carrying the most common label, or
    /// `None` if none are labeled.
    pub purity: Option<f64>,
    /// Whether the capsule's activation varies across samples at all.
    pub varies: bool,
}

/// Share of labeled entries equal to the most frequent label.
pub fn label_purity(labels: &[Option<u32>]) -> Option<f64> {
    let known: Vec<u32> = labels.iter().flatten().copied().collect();
    let mut counts = std::collections::BTreeMap::new();
    for l in &known {
        *counts.entry(*l).or_insert(0usize) += 1;
    }
    let best = counts.values().max()?;
    Some(*best as f64 / known.len() as f64)
}

/// Inspector over the secondary activations of `m` for every sample.
pub fn inspect(model: &Model, data: &Dataset, m: Modality, capsules: &[usize], top: usize) -> Result<Vec<CapsuleSummary>> {
    let acts = model.net.secondary_activations(&model.params, data.get(m), m)?;
    capsules
        .iter()
        .map(|&c| {
            let samples = top_activating(&acts, c, top)?;
            let labels: Vec<Option<u32>> = samples.iter().map(|&i| data.labels[i]).collect();
            let col: Vec<f64> = (0..acts.rows()).map(|r| acts.get(r, c)).collect();
            let varies = col.iter().any(|&v| (v - col[0]).abs() > 1e-12);
            Ok(CapsuleSummary {
                capsule: c,
                purity: label_purity(&labels),
                samples,
                labels,
                varies,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusion_examples() {
        assert_eq!(fuse_video_audio(&[1.0, 3.0], &[3.0, 1.0]).unwrap(), [2.0, 2.0]);
        assert_eq!(fuse_video_audio(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), [1.5, -2.0]);
        assert_eq!(fuse_video_audio(&[1.5, -2.0], &[-1.5, 2.0]).unwrap(), [0.0, 0.0]);
        assert!(fuse_video_audio(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn top_activating_examples() {
        let one_hot = Tensor2D::from_fn(5, 2, |r, c| if r == 3 && c == 1 { 1.0 } else { 0.0 });
        assert_eq!(top_activating(&one_hot, 1, 1).unwrap(), [3]);
        assert_eq!(top_activating(&one_hot, 1, 5).unwrap(), [3, 0, 1, 2, 4]);
        assert!(top_activating(&one_hot, 2, 1).is_err());
        assert!(top_activating(&one_hot, 0, 6).is_err());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let out = parallel_map(1000, |i| i * 2);
        assert_eq!(out, (0..1000).map(|i| i * 2).collect::<Vec<_>>());
        assert!(parallel_map(0, |i| i).is_empty());
    }

    #[test]
    fn purity_counts_labeled_entries() {
        assert_eq!(label_purity(&[Some(1), Some(1), Some(2), None]), Some(2.0 / 3.0));
        assert_eq!(label_purity(&[None]), None);
    }

    #[test]
    fn report_serializes_with_all_keys() {
        let r = report_from_ranks(&[1, 3], &DEFAULT_KS);
        let json = serde_json::to_value(EvalReport::from(&r)).unwrap();
        for key in ["r1", "r5", "r10", "medr", "recall", "iod", "iou"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(json["r1"], 0.5);
        assert_eq!(json["medr"], 2.0);
        assert!(json["iou"].is_null());
    }
}
