//! Helpers shared by the integration tests.
#![allow(dead_code)]

use mmcaps::gradcheck::{grad_check_filtered, GradCheckReport};
use mmcaps::loss::{total_loss_on_tape, DEFAULT_DELTA};
use mmcaps::model::{Architecture, CapsNet, InputDims, Modality, ModelConfig, RoutingKind};
use mmcaps::{rng, Mode, ParamSet, Tensor2D};
use rand_distr::{Distribution, StandardNormal};

/// The small model used by the gradient checks: C=4, d1=3, d2=8, heads=2, D=6.
pub fn gradcheck_config(routing: RoutingKind, architecture: Architecture) -> ModelConfig {
    ModelConfig {
        num_capsules: 4,
        primary_dim: 3,
        secondary_dim: 8,
        embed_dim: 6,
        heads: 2,
        hidden_mlp: 10,
        input_dims: InputDims { video: 8, audio: 6, text: 4 },
        routing,
        routing_iters: 3,
        architecture,
        attention_groups: 2,
        ..ModelConfig::default()
    }
}

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut rng::Rng) -> Tensor2D {
    Tensor2D::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Finite-difference check of forward + total loss on a batch of 3
/// standard-normal triples, parameters accepted by `filter` only.
pub fn check_full_model_filtered(cfg: &ModelConfig, seed: u64, h: f64, filter: impl Fn(&str) -> bool) -> GradCheckReport {
    let mut params = ParamSet::new();
    let net = CapsNet::new(cfg.clone(), &mut params, &mut rng::stream(seed, rng::streams::INIT)).unwrap();
    let mut data = rng::stream(seed, rng::streams::DATA);
    let inputs: Vec<Tensor2D> = Modality::ALL
        .iter()
        .map(|&m| normal_matrix(3, cfg.input_dims.get(m), &mut data))
        .collect();
    grad_check_filtered(&mut params, h, 1e-4, filter, |ps, tape| {
        let mut rng = rng::stream(0, 0);
        let mut out = Vec::new();
        for (m, x) in Modality::ALL.iter().zip(&inputs) {
            let x = tape.constant(x.clone());
            out.push(net.embed_on_tape(tape, ps, x, *m, Mode::Eval, &mut rng)?);
        }
        total_loss_on_tape(tape, out[0], out[1], out[2], DEFAULT_DELTA)
    })
    .unwrap()
}

pub fn check_full_model(cfg: &ModelConfig, seed: u64) -> GradCheckReport {
    check_full_model_filtered(cfg, seed, 1e-5, |_| true)
}
