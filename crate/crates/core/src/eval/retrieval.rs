//! Ranking of a gallery against paired queries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::parallel_map;
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// How gallery items are scored against a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Ascending euclidean distance.
    #[default]
    Euclidean,
    /// Descending dot product, the training similarity.
    Dot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// `K → fraction of queries whose match ranks within the top K`.
    pub r_at: BTreeMap<usize, f64>,
    /// Median 1-based rank; the mean of the middle two for even counts.
    pub med_r: f64,
}

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

fn score(metric: Metric, q: &[f64], g: &[f64]) -> f64 {
    match metric {
        // Squared distance preserves the order of the euclidean distance.
        Metric::Euclidean => q.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum(),
        Metric::Dot => -q.iter().zip(g).map(|(a, b)| a * b).sum::<f64>(),
    }
}

/// 1-based rank of gallery row `i` for query row `i`. Equal scores are
/// ordered by gallery index.
pub fn ranks(query: &Tensor2D, gallery: &Tensor2D, metric: Metric) -> Result<Vec<usize>> {
    if query.rows() == 0 {
        return Err(Error::Empty("retrieval query set"));
    }
    if query.shape() != gallery.shape() {
        return Err(Error::shape("retrieval_metrics", query.shape(), gallery.shape()));
    }
    let n = query.rows();
    Ok(parallel_map(n, |i| {
        let q = query.row(i);
        let own = score(metric, q, gallery.row(i));
        1 + (0..n)
            .filter(|&j| {
                let s = score(metric, q, gallery.row(j));
                s < own || (s == own && j < i)
            })
            .count()
    }))
}

pub fn median(values: &[usize]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

/// Recall at each of `ks` and the median rank.
pub fn retrieval_metrics(query: &Tensor2D, gallery: &Tensor2D, ks: &[usize], metric: Metric) -> Result<RetrievalReport> {
    let ranks = ranks(query, gallery, metric)?;
    Ok(report_from_ranks(&ranks, ks))
}

pub fn report_from_ranks(ranks: &[usize], ks: &[usize]) -> RetrievalReport {
    let n = ranks.len() as f64;
    let r_at = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    RetrievalReport {
        r_at,
        med_r: median(ranks),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_retrieval_is_perfect() {
        let q = Tensor2D::from_fn(7, 3, |r, c| (r * 3 + c) as f64);
        let rep = retrieval_metrics(&q, &q, &DEFAULT_KS, Metric::Euclidean).unwrap();
        assert_eq!(rep.r_at[&1], 1.0);
        assert_eq!(rep.med_r, 1.0);
    }

    #[test]
    fn hand_ranking_one_to_four() {
        // Gallery on a line at 0..3; every query sits just left of 0, so
        // item i is the (i+1)-th nearest to every query.
        let gallery = Tensor2D::from_rows(&[[0.0], [1.0], [2.0], [3.0]]).unwrap();
        let query = Tensor2D::from_rows(&[[0.0], [-0.2], [-0.1], [-0.3]]).unwrap();
        assert_eq!(ranks(&query, &gallery, Metric::Euclidean).unwrap(), [1, 2, 3, 4]);
        let rep = retrieval_metrics(&query, &gallery, &DEFAULT_KS, Metric::Euclidean).unwrap();
        assert_eq!(rep.r_at[&1], 0.25);
        assert_eq!(rep.med_r, 2.5);
        assert_eq!(rep.r_at[&5], 1.0);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let gallery = Tensor2D::zeros(3, 2);
        let query = Tensor2D::zeros(3, 2);
        assert_eq!(ranks(&query, &gallery, Metric::Euclidean).unwrap(), [1, 2, 3]);
    }

    #[test]
    fn dot_metric_prefers_large_products() {
        let gallery = Tensor2D::from_rows(&[[1.0, 0.0], [5.0, 0.0]]).unwrap();
        let query = Tensor2D::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        assert_eq!(ranks(&query, &gallery, Metric::Dot).unwrap(), [2, 1]);
        assert_eq!(ranks(&query, &gallery, Metric::Euclidean).unwrap(), [1, 2]);
    }

    #[test]
    fn errors() {
        let a = Tensor2D::zeros(0, 3);
        assert!(matches!(retrieval_metrics(&a, &a, &[1], Metric::Euclidean), Err(Error::Empty(_))));
        let (q, g) = (Tensor2D::zeros(2, 3), Tensor2D::zeros(2, 4));
        assert!(matches!(retrieval_metrics(&q, &g, &[1], Metric::Euclidean), Err(Error::Shape { .. })));
    }
}
