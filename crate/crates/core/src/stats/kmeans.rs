use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::{Rng, Tensor};
use crate::{Error, Result};

const MAX_LLOYD_ITERS: usize = 300;

/// One independent k-means run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansRun {
    pub assignments: Vec<usize>,
    pub centers: Tensor,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: each new center is drawn with probability proportional
/// to the squared distance from the nearest existing one.
pub(crate) fn kmeans_pp_seeds(x: &Tensor, k: usize, rng: &mut Rng) -> Tensor {
    let n = x.shape()[0];
    let mut chosen = vec![rng.below(n)];
    let mut nearest: Vec<f64> = x.rows().map(|r| sq_dist(r, x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            rng.categorical(&nearest)
        } else {
            // every point coincides with a center already
            rng.below(n)
        };
        chosen.push(next);
        for (i, r) in x.rows().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(r, x.row(next)));
        }
    }
    x.select_rows(&chosen)
}

fn assign(x: &Tensor, centers: &Tensor) -> (Vec<usize>, Vec<f64>) {
    let k = centers.shape()[0];
    x.rows()
        .map(|r| {
            (0..k)
                .map(|j| (j, sq_dist(r, centers.row(j))))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("k ≥ 1")
        })
        .unzip()
}

fn lloyd(x: &Tensor, k: usize, rng: &mut Rng) -> KMeansRun {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut centers = kmeans_pp_seeds(x, k, rng);
    let mut trace = Vec::new();
    let (mut assignments, mut dists) = assign(x, &centers);
    for _ in 0..MAX_LLOYD_ITERS {
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, r) in x.rows().enumerate() {
            let c = assignments[i];
            counts[c] += 1;
            for a in 0..d {
                sums[c * d + a] += r[a];
            }
        }
        let cd = centers.data_mut();
        for j in 0..k {
            if counts[j] == 0 {
                // reseed from the point worst served by the current centers
                let far = (0..n).max_by(|&a, &b| dists[a].total_cmp(&dists[b])).unwrap_or(0);
                log::debug!("k-means cluster {j} emptied; reseeding at point {far}");
                cd[j * d..(j + 1) * d].copy_from_slice(x.row(far));
                dists[far] = 0.0;
            } else {
                for a in 0..d {
                    cd[j * d + a] = sums[j * d + a] / counts[j] as f64;
                }
            }
        }
        let (next, next_d) = assign(x, &centers);
        let inertia: f64 = next_d.iter().sum();
        trace.push(inertia);
        let stable = next == assignments;
        assignments = next;
        dists = next_d;
        if stable {
            break;
        }
    }
    KMeansRun {
        assignments,
        centers,
        inertia: dists.iter().sum(),
        inertia_trace: trace,
    }
}

/// `n_runs` independent Lloyd runs, each seeded by k-means++ from its own
/// fork of `rng`. Runs execute in parallel but results are deterministic.
pub fn kmeans(points: &Tensor, k: usize, n_runs: usize, rng: &mut Rng) -> Result<Vec<KMeansRun>> {
    if points.rank() != 2 {
        return Err(Error::invalid(format!("kmeans expects [N×d] points, got {:?}", points.shape())));
    }
    let n = points.shape()[0];
    if k == 0 || n < k {
        return Err(Error::invalid(format!("kmeans needs 1 ≤ K ≤ N, got K={k}, N={n}")));
    }
    if n_runs == 0 {
        return Err(Error::invalid("kmeans needs at least one run"));
    }
    let rngs: Vec<Rng> = (0..n_runs).map(|_| rng.fork()).collect();
    Ok(rngs.into_par_iter().map(|mut r| lloyd(points, k, &mut r)).collect())
}

/// Fraction of points whose cluster's most frequent label matches their own.
pub fn majority_label_accuracy(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.len() != labels.len() || assignments.is_empty() {
        return Err(Error::invalid(format!(
            "{} assignments vs {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    let nc = assignments.iter().max().map_or(0, |m| m + 1);
    let nl = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; nc * nl];
    for (&a, &l) in assignments.iter().zip(labels) {
        counts[a * nl + l] += 1;
    }
    let correct: usize = counts.chunks(nl).map(|c| c.iter().copied().max().unwrap_or(0)).sum();
    Ok(correct as f64 / labels.len() as f64)
}
