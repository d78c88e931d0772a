#![allow(dead_code)]

use gae_forge::models::{Model, ModelConfig, ModelKind};
use gae_forge::nn::{ParamGroup, ParamId};
use gae_forge::training::Trainable;
use gae_forge::{Graph, Rng, Tensor};

/// Small instance of every kind: 4×4 inputs, d = 3, one narrow hidden layer.
pub fn tiny_config(kind: ModelKind) -> ModelConfig {
    let mut c = ModelConfig::new(kind, vec![1, 4, 4], 3);
    c.encoder_hidden_dims = Some(vec![6]);
    c.decoder_hidden_dims = Some(vec![6]);
    match kind {
        ModelKind::BetaVAE => c.beta = Some(2.5),
        ModelKind::VaeLinNf => c.flow_sequence = Some("PRP".into()),
        ModelKind::VaeIaf => {
            c.made_hidden_size = Some(4);
            c.made_hidden_layers = Some(1);
        }
        ModelKind::IWAE => c.n_samples = Some(3),
        ModelKind::VAMP => c.n_pseudo_inputs = Some(3),
        ModelKind::BetaTCVAE => {
            c.beta = Some(3.0);
            c.dataset_size = Some(50);
        }
        ModelKind::FactorVAE => c.disc_hidden_dims = Some(vec![5, 5]),
        ModelKind::AAE => c.disc_hidden_dims = Some(vec![5]),
        ModelKind::VAEGAN => {
            c.disc_hidden_dims = Some(vec![5, 5, 4]);
            c.reconstruction_layer = Some(2);
        }
        ModelKind::VQVAE => c.codebook_size = Some(4),
        ModelKind::RaeL2 | ModelKind::RaeGp => {
            c.beta = Some(0.3);
            c.lambda = Some(0.2);
        }
        _ => {}
    }
    c
}

pub fn tiny_batch(rows: usize, rng: &mut Rng) -> Tensor {
    Tensor::rand_uniform(&[rows, 16], 0.02, 0.98, rng)
}

/// Value of loss `which` (0 = monitored total) with fresh noise from `seed`.
pub fn loss_value(model: &Model, batch: &Tensor, seed: u64, which: usize) -> f64 {
    let mut m = model.clone();
    let g = Graph::new();
    let p = m.store.bind_frozen(&g);
    let losses = m.losses(&g, &p, batch, &mut Rng::new(seed), false).unwrap();
    losses[which].loss.item()
}

/// Analytic gradients of loss `which` for every parameter of `groups`.
pub fn analytic_grads(model: &Model, batch: &Tensor, seed: u64, which: usize, groups: &[ParamGroup]) -> Vec<(ParamId, Tensor)> {
    let mut m = model.clone();
    let g = Graph::new();
    let p = m.store.bind(&g);
    let losses = m.losses(&g, &p, batch, &mut Rng::new(seed), false).unwrap();
    g.backward(losses[which].loss).unwrap();
    let ids = model.store.ids_in(groups);
    let grads = p.grads(&g, &ids);
    ids.into_iter().zip(grads).collect()
}

/// Up to `per_tensor` evenly spread coordinates of each tensor.
pub fn probe_coords(numel: usize, per_tensor: usize) -> Vec<usize> {
    let step = numel.div_ceil(per_tensor).max(1);
    (0..numel).step_by(step).collect()
}

/// Worst `|analytic − central difference| / max(1, |analytic|)` over probed
/// coordinates, where `f` evaluates the objective on a perturbed model.
pub fn fd_error(
    model: &Model,
    grads: &[(ParamId, Tensor)],
    eps: f64,
    per_tensor: usize,
    f: impl Fn(&Model) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for (id, grad) in grads {
        for i in probe_coords(grad.numel(), per_tensor) {
            let mut plus = model.clone();
            plus.store.get_mut(*id).data_mut()[i] += eps;
            let mut minus = model.clone();
            minus.store.get_mut(*id).data_mut()[i] -= eps;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * eps);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
    }
    worst
}

/// Groups each loss of `kind` optimizes, in the order the model returns them.
pub fn loss_groups(model: &Model, batch: &Tensor) -> Vec<Vec<ParamGroup>> {
    let mut m = model.clone();
    let g = Graph::new();
    let p = m.store.bind_frozen(&g);
    m.losses(&g, &p, batch, &mut Rng::new(0), false)
        .unwrap()
        .into_iter()
        .map(|l| l.groups)
        .collect()
}

/// Gradient check of every loss of a model against its own parameter groups.
/// VQ-VAE encoder gradients are checked against the straight-through
/// surrogate instead, since its forward value does not depend on them.
pub fn model_grad_error(model: &Model, batch: &Tensor, seed: u64) -> f64 {
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for (which, groups) in loss_groups(model, batch).into_iter().enumerate() {
        let groups: Vec<ParamGroup> = if model.kind() == ModelKind::VQVAE {
            groups.into_iter().filter(|g| *g != ParamGroup::Encoder).collect()
        } else {
            groups
        };
        let grads = analytic_grads(model, batch, seed, which, &groups);
        worst = worst.max(fd_error(model, &grads, eps, 6, |m| loss_value(m, batch, seed, which)));
    }
    if model.kind() == ModelKind::VQVAE {
        worst = worst.max(vq_encoder_grad_error(model, batch, eps));
    }
    worst
}

fn vq_encoder_grad_error(model: &Model, batch: &Tensor, eps: f64) -> f64 {
    use gae_forge::models::reconstruction_per_row;
    let cfg = &model.config;
    let z_e0 = model.encode_mean(batch).unwrap();
    let z_q0 = model.embed(batch).unwrap();
    // recon(dec(z_e + (z_q0 − z_e0))) + β‖z_e − z_q0‖², offset frozen
    let surrogate = |m: &Model| -> f64 {
        let z_e = m.encode_mean(batch).unwrap();
        let g = Graph::new();
        let p = m.store.bind_frozen(&g);
        let shifted = Tensor::new(
            z_e.shape().to_vec(),
            z_e.data().iter().zip(z_q0.data()).zip(z_e0.data()).map(|((e, q), e0)| e + q - e0).collect(),
        )
        .unwrap();
        let logits = m.decoder.logits(&p, g.constant(shifted)).unwrap();
        let rec = reconstruction_per_row(cfg.reconstruction(), logits, g.constant(batch.clone()))
            .unwrap()
            .mean()
            .item();
        let b = batch.shape()[0] as f64;
        let commit: f64 = z_e.data().iter().zip(z_q0.data()).map(|(e, q)| (e - q) * (e - q)).sum::<f64>() / b;
        rec + cfg.beta() * commit
    };
    let grads = analytic_grads(model, batch, 0, 0, &[ParamGroup::Encoder]);
    fd_error(model, &grads, eps, 6, surrogate)
}

/// A model of `kind` with random weights plus a matching batch.
pub fn tiny_instance(kind: ModelKind, seed: u64) -> (Model, Tensor) {
    let mut rng = Rng::new(seed);
    let mut model = Model::new(tiny_config(kind), &mut rng).unwrap();
    // zero-initialized biases put pre-activations exactly on ReLU kinks
    // whenever a hidden layer is dead for some row
    for i in 0..model.store.len() {
        let e = model.store.entry_mut(i);
        if e.name.ends_with(".bias") {
            for v in e.tensor.data_mut() {
                *v = 0.1 * rng.normal();
            }
        }
    }
    let batch = tiny_batch(6, &mut rng);
    (model, batch)
}
