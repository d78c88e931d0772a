//! Downstream tasks run on a trained model, and the record table they fill.
//!
//! Latent representations for classification and clustering are posterior
//! means. Reconstruction and interpolation go through [`Model::embed`], the
//! deterministic code the decoder actually consumes.

mod features;
mod pgm;
mod probe;
mod records;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use features::{frechet_feature_distance, FeatureMap, DEFAULT_FEATURE_DIM, EIGENVALUE_FLOOR};
pub use pgm::{encode_pgm_grid, write_pgm_grid};
pub use probe::ProbeConfig;
pub use records::{format_mean_sd, BenchmarkRecord, RecordKey, RecordTable, Task, CSV_HEADER};

use crate::data::Dataset;
use crate::models::Model;
use crate::samplers::{sample, SamplerState};
use crate::stats::{kmeans, majority_label_accuracy};
use crate::tensor::{Rng, Tensor};
use crate::{Error, Result};

pub const DEFAULT_CLUSTERING_RUNS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation over runs; 0 for a single run.
    pub sd: f64,
    pub runs: Vec<f64>,
}

impl MeanSd {
    pub fn from_runs(runs: Vec<f64>) -> MeanSd {
        let n = runs.len() as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let sd = if runs.len() > 1 {
            (runs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanSd { mean, sd, runs }
    }

    pub fn formatted(&self) -> String {
        format_mean_sd(self.mean, self.sd)
    }
}

/// Mean per-pixel squared error between images and their reconstructions.
pub fn task_reconstruction(model: &Model, data: &Dataset) -> Result<f64> {
    let x = data.flat();
    let r = model.reconstruct(&x)?;
    Ok(x.data().iter().zip(r.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.numel() as f64)
}

/// Fréchet feature distance between `n` generated images and `reference: [M×D]`.
pub fn task_generation(
    model: &Model,
    sampler: &SamplerState,
    reference: &Tensor,
    fmap: &FeatureMap,
    n: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid("generation needs at least 2 samples"));
    }
    let generated = sample(sampler, model, n, rng)?;
    frechet_feature_distance(&generated, reference, fmap)
}

fn labels_of(ds: &Dataset) -> Result<Vec<usize>> {
    ds.labels_usize()
        .ok_or_else(|| Error::invalid(format!("{} split has no labels", ds.split)))
}

/// Linear-probe accuracy on latent codes, `cfg.n_runs` fresh initialisations.
/// Features are standardised with training statistics.
pub fn classification_on_latents(
    train_z: &Tensor,
    train_labels: &[usize],
    eval_z: &Tensor,
    eval_labels: &[usize],
    cfg: &ProbeConfig,
    rng: &mut Rng,
) -> Result<MeanSd> {
    let mut distinct = train_labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::invalid("classification needs at least two classes in the training labels"));
    }
    if cfg.n_runs == 0 {
        return Err(Error::invalid("classification needs at least one run"));
    }
    if eval_labels.len() != eval_z.shape()[0] || eval_labels.is_empty() {
        return Err(Error::invalid("evaluation labels do not match evaluation latents"));
    }
    let n_classes = train_labels.iter().chain(eval_labels).max().map_or(0, |m| m + 1);
    let (tz, ez) = probe::standardize(train_z, eval_z);
    let seeds: Vec<u64> = (0..cfg.n_runs).map(|_| rng.next_u64()).collect();
    let runs = seeds
        .into_par_iter()
        .map(|seed| {
            let mut tc = cfg.train.clone();
            tc.seed = seed;
            let probe = probe::fit_probe(&tz, train_labels, n_classes, &tc)?;
            let pred = probe.predict(&ez)?;
            Ok(pred.iter().zip(eval_labels).filter(|(p, l)| p == l).count() as f64 / eval_labels.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(MeanSd::from_runs(runs))
}

pub fn task_classification(model: &Model, train: &Dataset, eval: &Dataset, cfg: &ProbeConfig, rng: &mut Rng) -> Result<MeanSd> {
    let (tl, el) = (labels_of(train)?, labels_of(eval)?);
    let tz = model.encode_mean(&train.flat())?;
    let ez = model.encode_mean(&eval.flat())?;
    classification_on_latents(&tz, &tl, &ez, &el, cfg, rng)
}

/// Majority-label accuracy of `n_runs` independent k-means runs.
pub fn clustering_on_latents(z: &Tensor, labels: &[usize], k: usize, n_runs: usize, rng: &mut Rng) -> Result<MeanSd> {
    let runs = kmeans(z, k, n_runs, rng)?
        .iter()
        .map(|r| majority_label_accuracy(&r.assignments, labels))
        .collect::<Result<Vec<f64>>>()?;
    Ok(MeanSd::from_runs(runs))
}

/// `k` defaults to the number of distinct labels.
pub fn task_clustering(model: &Model, data: &Dataset, k: Option<usize>, n_runs: usize, rng: &mut Rng) -> Result<MeanSd> {
    let labels = labels_of(data)?;
    let k = k.unwrap_or_else(|| {
        let mut d = labels.clone();
        d.sort_unstable();
        d.dedup();
        d.len()
    });
    clustering_on_latents(&model.encode_mean(&data.flat())?, &labels, k, n_runs, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Interpolation {
    /// `[steps×d]`
    pub latents: Tensor,
    /// `[steps×D]` decoded frames.
    pub frames: Tensor,
}

/// Decodes `z_t = (1−t)·z_start + t·z_end` at `steps` evenly spaced `t ∈ [0, 1]`.
pub fn task_interpolation(model: &Model, x_start: &[f64], x_end: &[f64], steps: usize) -> Result<Interpolation> {
    if steps < 2 {
        return Err(Error::invalid(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    let ends = model.embed(&Tensor::from_rows(&[x_start, x_end])?)?;
    let (zs, ze) = (ends.row(0), ends.row(1));
    let d = zs.len();
    let mut data = Vec::with_capacity(steps * d);
    for i in 0..steps {
        let t = i as f64 / (steps - 1) as f64;
        data.extend(zs.iter().zip(ze).map(|(a, b)| (1.0 - t) * a + t * b));
    }
    let latents = Tensor::new(vec![steps, d], data)?;
    let frames = model.decode_latent(&latents)?;
    Ok(Interpolation { latents, frames })
}
