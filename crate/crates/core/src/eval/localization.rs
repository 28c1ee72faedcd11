//! Per-step action labels and segment overlap scores.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Frames `start..end` carrying action `label`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

impl Segment {
    pub fn new(start: usize, end: usize, label: usize) -> Result<Self> {
        let s = Self { start, end, label };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        if self.start >= self.end {
            return Err(Error::InvalidSegment { start: self.start, end: self.end });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

/// Maximal runs of equal labels; unlabeled steps start no segment.
pub fn segments_from_labels(labels: &[Option<usize>]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (t, l) in labels.iter().enumerate() {
        let Some(l) = *l else { continue };
        match out.last_mut() {
            Some(s) if s.end == t && s.label == l => s.end += 1,
            _ => out.push(Segment { start: t, end: t + 1, label: l }),
        }
    }
    out
}

/// Nearest action per time-step by euclidean distance, ties to the lowest index.
pub fn localize(clip_embs: &Tensor2D, action_embs: &Tensor2D) -> Result<Vec<usize>> {
    if action_embs.rows() == 0 {
        return Err(Error::Empty("action embeddings"));
    }
    if clip_embs.cols() != action_embs.cols() {
        return Err(Error::shape("localize", clip_embs.shape(), action_embs.shape()));
    }
    Ok((0..clip_embs.rows())
        .map(|t| {
            let c = clip_embs.row(t);
            let mut best = (f64::INFINITY, 0);
            for a in 0..action_embs.rows() {
                let d: f64 = c.iter().zip(action_embs.row(a)).map(|(x, y)| (x - y) * (x - y)).sum();
                if d < best.0 {
                    best = (d, a);
                }
            }
            best.1
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    /// `label → (IoD, IoU)` for every label present in the ground truth.
    pub per_action: BTreeMap<usize, (f64, f64)>,
    pub iod: f64,
    pub iou: f64,
}

fn frames(segments: &[Segment], label: usize) -> BTreeSet<usize> {
    segments.iter().filter(|s| s.label == label).flat_map(|s| s.start..s.end).collect()
}

/// IoD = |G∩D|/|D| and IoU = |G∩D|/|G∪D| per action, macro averaged
/// over the actions that occur in `gt`. An empty `D` gives IoD 0; empty
/// `G` and `D` together give IoU 1.
pub fn iod_iou(gt: &[Segment], pred: &[Segment]) -> Result<Overlap> {
    for s in gt.iter().chain(pred) {
        s.check()?;
    }
    let labels: BTreeSet<usize> = gt.iter().map(|s| s.label).collect();
    if labels.is_empty() {
        return Err(Error::Empty("ground-truth segments"));
    }
    let per_action: BTreeMap<usize, (f64, f64)> = labels
        .iter()
        .map(|&l| {
            let (g, d) = (frames(gt, l), frames(pred, l));
            let inter = g.intersection(&d).count() as f64;
            let union = g.union(&d).count() as f64;
            let iod = if d.is_empty() { 0.0 } else { inter / d.len() as f64 };
            let iou = if union == 0.0 { 1.0 } else { inter / union };
            (l, (iod, iou))
        })
        .collect();
    let n = per_action.len() as f64;
    Ok(Overlap {
        iod: per_action.values().map(|v| v.0).sum::<f64>() / n,
        iou: per_action.values().map(|v| v.1).sum::<f64>() / n,
        per_action,
    })
}

/// Fraction of ground-truth segments with at least one step predicted as
/// the segment's label.
pub fn localization_recall(gt: &[Segment], pred: &[usize]) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::Empty("ground-truth segments"));
    }
    let mut hits = 0;
    for s in gt {
        s.check()?;
        if s.end > pred.len() {
            return Err(Error::Range(format!("segment ends at {} past {} steps", s.end, pred.len())));
        }
        if pred[s.start..s.end].contains(&s.label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / gt.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(s: usize, e: usize, l: usize) -> Segment {
        Segment::new(s, e, l).unwrap()
    }

    #[test]
    fn overlap_examples() {
        let g = [seg(0, 10, 0)];
        let same = iod_iou(&g, &g).unwrap();
        assert_eq!((same.iod, same.iou), (1.0, 1.0));
        let shifted = iod_iou(&g, &[seg(5, 15, 0)]).unwrap();
        assert_eq!(shifted.iod, 0.5);
        assert!((shifted.iou - 1.0 / 3.0).abs() < 1e-15);
        let none = iod_iou(&g, &[]).unwrap();
        assert_eq!((none.iod, none.iou), (0.0, 0.0));
    }

    #[test]
    fn macro_average_over_gt_labels_only() {
        let g = [seg(0, 4, 0), seg(4, 8, 1)];
        let d = [seg(0, 4, 0), seg(4, 8, 2)];
        let o = iod_iou(&g, &d).unwrap();
        assert_eq!(o.per_action.len(), 2);
        assert_eq!(o.per_action[&0], (1.0, 1.0));
        assert_eq!(o.per_action[&1], (0.0, 0.0));
        assert_eq!((o.iod, o.iou), (0.5, 0.5));
    }

    #[test]
    fn invalid_segments_rejected() {
        assert!(matches!(Segment::new(3, 3, 0), Err(Error::InvalidSegment { start: 3, end: 3 })));
        let bad = Segment { start: 5, end: 2, label: 0 };
        assert!(iod_iou(&[bad], &[]).is_err());
        assert!(localization_recall(&[bad], &[0; 8]).is_err());
        assert!(iod_iou(&[], &[]).is_err());
    }

    #[test]
    fn recall_examples() {
        let g = [seg(0, 3, 1), seg(3, 6, 2)];
        assert_eq!(localization_recall(&g, &[1, 1, 1, 2, 2, 2]).unwrap(), 1.0);
        assert_eq!(localization_recall(&g, &[7; 6]).unwrap(), 0.0);
        assert_eq!(localization_recall(&g, &[0, 1, 0, 0, 0, 0]).unwrap(), 0.5);
        assert!(localization_recall(&g, &[1, 1]).is_err());
    }

    #[test]
    fn localize_examples() {
        let clips = Tensor2D::from_fn(5, 2, |r, c| (r + c) as f64);
        assert_eq!(localize(&clips, &Tensor2D::zeros(1, 2)).unwrap(), [0; 5]);
        let actions = Tensor2D::from_rows(&[[0.0, 0.0], [5.0, 5.0], [2.0, 2.0]]).unwrap();
        let rows = Tensor2D::from_rows(&[[2.0, 2.0], [0.0, 0.0], [5.0, 5.0]]).unwrap();
        assert_eq!(localize(&rows, &actions).unwrap(), [2, 0, 1]);
        // Equidistant from actions 0 and 1.
        let mid = Tensor2D::from_rows(&[[2.5, 2.5]]).unwrap();
        let two = Tensor2D::from_rows(&[[0.0, 0.0], [5.0, 5.0]]).unwrap();
        assert_eq!(localize(&mid, &two).unwrap(), [0]);
        assert!(localize(&clips, &Tensor2D::zeros(1, 3)).is_err());
    }

    #[test]
    fn runs_become_segments() {
        let labels = [Some(1), Some(1), None, Some(1), Some(2), Some(2)];
        assert_eq!(segments_from_labels(&labels), [seg(0, 2, 1), seg(3, 4, 1), seg(4, 6, 2)]);
    }
}
