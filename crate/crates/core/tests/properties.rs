//! Randomized invariants of metrics, schedules, storage and training.

mod common;

use proptest::prelude::*;

use mmcaps::data::{generate_synthetic, read_feature_file, write_feature_file, SyntheticSpec};
use mmcaps::eval::{iod_iou, ranks, retrieval_metrics, segments_from_labels, Metric};
use mmcaps::model::{InputDims, Modality, ModelConfig};
use mmcaps::train::{cosine_lr, TrainConfig, Trainer};
use mmcaps::Tensor2D;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor2D> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor2D::from_vec(rows, cols, v).unwrap())
}

fn pair() -> impl Strategy<Value = (Tensor2D, Tensor2D)> {
    (2usize..24, 1usize..8).prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d)))
}

/// Householder reflection `I − 2vvᵀ/|v|²`, an orthogonal map.
fn reflect(x: &Tensor2D, v: &[f64]) -> Tensor2D {
    let vv: f64 = v.iter().map(|a| a * a).sum();
    Tensor2D::from_fn(x.rows(), x.cols(), |r, c| {
        let dot: f64 = x.row(r).iter().zip(v).map(|(a, b)| a * b).sum();
        x.get(r, c) - 2.0 * dot / vv * v[c]
    })
}

fn labels(t: usize) -> impl Strategy<Value = Vec<Option<usize>>> {
    prop::collection::vec(prop::option::weighted(0.8, 0usize..4), t)
}

proptest! {
    #[test]
    fn recall_grows_with_k_and_is_total_at_n((q, g) in pair()) {
        let n = q.rows();
        let ks: Vec<usize> = (1..=n).collect();
        let report = retrieval_metrics(&q, &g, &ks, Metric::Euclidean).unwrap();
        let recalls: Vec<f64> = ks.iter().map(|k| report.r_at[k]).collect();
        prop_assert!(recalls.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(report.r_at[&n], 1.0);
        prop_assert!(report.med_r >= 1.0 && report.med_r <= n as f64);
    }

    #[test]
    fn euclidean_ranks_survive_orthogonal_maps(
        (q, g) in pair(),
        v in prop::collection::vec(0.1f64..1.0, 8),
    ) {
        let v = &v[..q.cols()];
        prop_assert_eq!(ranks(&q, &g, Metric::Euclidean).unwrap(), ranks(&reflect(&q, v), &reflect(&g, v), Metric::Euclidean).unwrap());
    }

    #[test]
    fn euclidean_ranks_survive_a_shared_translation((q, g) in pair(), shift in -2.0f64..2.0) {
        let t = |m: &Tensor2D| m.map(|x| x + shift);
        prop_assert_eq!(ranks(&q, &g, Metric::Euclidean).unwrap(), ranks(&t(&q), &t(&g), Metric::Euclidean).unwrap());
    }

    #[test]
    fn iou_never_exceeds_iod((gt, pred) in (1usize..64).prop_flat_map(|t| (labels(t), labels(t)))) {
        let gt = segments_from_labels(&gt);
        prop_assume!(!gt.is_empty());
        let o = iod_iou(&gt, &segments_from_labels(&pred)).unwrap();
        prop_assert!(o.iou <= o.iod + 1e-15 && o.iod <= 1.0 && o.iou >= 0.0);
        for (iod, iou) in o.per_action.values() {
            prop_assert!(iou <= iod && *iod <= 1.0);
        }
    }

    #[test]
    fn learning_rate_never_increases(total in 1u64..5000, lr0 in 1e-6f64..1.0) {
        let mut prev = f64::INFINITY;
        for s in 0..=total.min(400) {
            let lr = cosine_lr(s * total / total.min(400), total, lr0).unwrap();
            prop_assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
    }

    #[test]
    fn feature_files_round_trip(
        (rows, dim) in (0usize..12, 1usize..10),
        seed in any::<u64>(),
        tag in 0u8..3,
    ) {
        let mut rng = mmcaps::rng::stream(seed, 0);
        let x = common::normal_matrix(rows, dim, &mut rng).map(|v| f64::from(v as f32));
        let labels: Vec<Option<u32>> = (0..rows).map(|i| (i % 3 != 0).then_some(i as u32 * 7)).collect();
        let m = Modality::from_tag(tag).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.mmcf");
        write_feature_file(&path, m, &x, &labels).unwrap();
        let back = read_feature_file(&path).unwrap();
        prop_assert_eq!(back.modality, m);
        prop_assert_eq!(back.features, x);
        prop_assert_eq!(back.labels, labels);
    }
}

/// A small step downhill lowers the loss of the batch it was taken on.
#[test]
fn one_small_step_lowers_the_batch_loss() {
    let dims = InputDims { video: 12, audio: 10, text: 8 };
    let model = ModelConfig {
        num_capsules: 4,
        primary_dim: 4,
        secondary_dim: 8,
        embed_dim: 8,
        heads: 2,
        hidden_mlp: 16,
        dropout_p: 0.0,
        input_dims: dims,
        ..ModelConfig::desk()
    };
    let trials = 60;
    let mut lowered = 0;
    for seed in 0..trials {
        let spec = SyntheticSpec { n_train: 16, n_test: 8, dims, seed, ..SyntheticSpec::default() };
        let (train, _) = generate_synthetic(&spec).unwrap();
        let config = TrainConfig { lr0: 1e-4, total_steps: 1000, batch_size: 16, seed, ..TrainConfig::desk() };
        let mut trainer = Trainer::new(model.clone(), config).unwrap();
        let all: Vec<usize> = (0..train.len()).collect();
        let before = trainer.eval_loss(&train, &all).unwrap();
        trainer.step(&train).unwrap();
        lowered += usize::from(trainer.eval_loss(&train, &all).unwrap() < before);
    }
    assert!(lowered as f64 >= 0.95 * trials as f64, "{lowered}/{trials}");
}
