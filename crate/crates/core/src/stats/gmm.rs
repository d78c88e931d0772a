use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::kmeans::kmeans_pp_seeds;
use super::LN_2PI;
use crate::tensor::{Rng, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    #[default]
    Full,
    Diagonal,
}

/// Mixture parameters. `covariances` is `[K×d×d]` for full and `[K×d]` for
/// diagonal mixtures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub kind: CovarianceKind,
    pub weights: Vec<f64>,
    pub means: Tensor,
    pub covariances: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmOptions {
    pub components: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub covariance: CovarianceKind,
    pub reg_covar: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions {
            components: 10,
            max_iter: 200,
            tol: 1e-6,
            covariance: CovarianceKind::Full,
            reg_covar: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub params: GmmParams,
    /// Mean per-point log-likelihood, one entry per evaluation (initial plus each EM step).
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    /// Components re-seeded because their responsibility mass vanished.
    pub reinitialized: usize,
}

struct Component {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
}

impl GmmParams {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }

    fn covariance(&self, k: usize) -> DMatrix<f64> {
        let d = self.dim();
        match self.kind {
            CovarianceKind::Full => DMatrix::from_row_slice(d, d, &self.covariances.data()[k * d * d..(k + 1) * d * d]),
            CovarianceKind::Diagonal => {
                DMatrix::from_diagonal(&DVector::from_row_slice(&self.covariances.data()[k * d..(k + 1) * d]))
            }
        }
    }

    fn components(&self) -> Result<Vec<Component>> {
        (0..self.k())
            .map(|k| {
                let cov = self.covariance(k);
                let chol = cov
                    .cholesky()
                    .ok_or_else(|| Error::invalid(format!("gmm component {k} covariance is not positive definite")))?
                    .unpack();
                let log_det = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
                Ok(Component {
                    mean: DVector::from_row_slice(self.means.row(k)),
                    chol,
                    log_det,
                })
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let k = self.k();
        let d = self.means.shape().get(1).copied().unwrap_or(0);
        let cov_shape: Vec<usize> = match self.kind {
            CovarianceKind::Full => vec![k, d, d],
            CovarianceKind::Diagonal => vec![k, d],
        };
        if k == 0 || self.means.shape() != [k, d] || self.covariances.shape() != cov_shape.as_slice() {
            return Err(Error::invalid(format!(
                "inconsistent gmm shapes: {k} weights, means {:?}, covariances {:?}",
                self.means.shape(),
                self.covariances.shape()
            )));
        }
        if !self.means.all_finite() || !self.covariances.all_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("gmm parameters".into()));
        }
        Ok(())
    }
}

/// `[N×K]` matrix of `log w_k + log N(x_n; μ_k, Σ_k)`.
fn weighted_log_probs(params: &GmmParams, comps: &[Component], x: &Tensor) -> Vec<f64> {
    let d = params.dim();
    let k = comps.len();
    let mut out = vec![0.0; x.shape()[0] * k];
    for (n, row) in x.rows().enumerate() {
        let xv = DVector::from_row_slice(row);
        for (j, c) in comps.iter().enumerate() {
            let diff = &xv - &c.mean;
            let y = c.chol.solve_lower_triangular(&diff).expect("cholesky factor is non-singular");
            let lp = -0.5 * (d as f64 * LN_2PI + c.log_det + y.norm_squared());
            out[n * k + j] = params.weights[j].ln() + lp;
        }
    }
    out
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-density of each row of `z` under the mixture.
pub fn gmm_log_density(params: &GmmParams, z: &Tensor) -> Result<Vec<f64>> {
    params.validate()?;
    if z.rank() != 2 || z.shape()[1] != params.dim() {
        return Err(Error::ShapeMismatch {
            op: "gmm_log_density",
            lhs: z.shape().to_vec(),
            rhs: vec![params.dim()],
        });
    }
    let comps = params.components()?;
    let k = params.k();
    let lp = weighted_log_probs(params, &comps, z);
    Ok(lp.chunks(k).map(logsumexp).collect())
}

/// Ancestral sampling: a component from the weights, then its Gaussian.
pub fn gmm_sample(params: &GmmParams, n: usize, rng: &mut Rng) -> Result<Tensor> {
    params.validate()?;
    let comps = params.components()?;
    let d = params.dim();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let c = &comps[rng.categorical(&params.weights)];
        let eps = DVector::from_iterator(d, (0..d).map(|_| rng.normal()));
        let z = &c.mean + &c.chol * eps;
        data.extend(z.iter());
    }
    Tensor::new(vec![n, d], data)
}

/// EM fit with k-means++ seeding. The first log-likelihood entry is for the
/// seeded parameters.
pub fn fit_gmm_em(x: &Tensor, opts: &GmmOptions, rng: &mut Rng) -> Result<GmmFit> {
    if x.rank() != 2 {
        return Err(Error::invalid(format!("gmm expects [N×d] data, got {:?}", x.shape())));
    }
    let n = x.shape()[0];
    let k = opts.components;
    if k == 0 || n < k {
        return Err(Error::invalid(format!("gmm needs 1 ≤ K ≤ N, got K={k}, N={n}")));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("gmm training data".into()));
    }

    // hard assignment to the seeds gives the starting responsibilities
    let seeds = kmeans_pp_seeds(x, k, rng);
    let mut resp = vec![0.0; n * k];
    for (i, row) in x.rows().enumerate() {
        let best = (0..k)
            .min_by(|&a, &b| sq_dist(row, seeds.row(a)).total_cmp(&sq_dist(row, seeds.row(b))))
            .unwrap_or(0);
        resp[i * k + best] = 1.0;
    }

    let mut reinitialized = 0;
    let mut params = m_step(x, &resp, opts, rng, &mut reinitialized)?;
    let (mut ll, first_resp) = e_step(&params, x)?;
    resp = first_resp;
    let mut trace = vec![ll];
    let mut converged = false;

    for _ in 0..opts.max_iter {
        params = m_step(x, &resp, opts, rng, &mut reinitialized)?;
        let (next_ll, next_resp) = e_step(&params, x)?;
        resp = next_resp;
        trace.push(next_ll);
        let improvement = next_ll - ll;
        ll = next_ll;
        if improvement.abs() <= opts.tol * ll.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Ok(GmmFit {
        params,
        log_likelihood: trace,
        converged,
        reinitialized,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn e_step(params: &GmmParams, x: &Tensor) -> Result<(f64, Vec<f64>)> {
    let comps = params.components()?;
    let k = params.k();
    let mut lp = weighted_log_probs(params, &comps, x);
    let mut total = 0.0;
    for row in lp.chunks_mut(k) {
        let lse = logsumexp(row);
        total += lse;
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    let n = x.shape()[0];
    Ok((total / n as f64, lp))
}

fn m_step(
    x: &Tensor,
    resp: &[f64],
    opts: &GmmOptions,
    rng: &mut Rng,
    reinitialized: &mut usize,
) -> Result<GmmParams> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let k = opts.components;
    let mut nk: Vec<f64> = (0..k).map(|j| (0..n).map(|i| resp[i * k + j]).sum()).collect();
    let mut means = vec![0.0; k * d];
    let cov_len = match opts.covariance {
        CovarianceKind::Full => d * d,
        CovarianceKind::Diagonal => d,
    };
    let mut covs = vec![0.0; k * cov_len];
    let floor = 10.0 * f64::EPSILON * n as f64;

    for j in 0..k {
        let mean = &mut means[j * d..(j + 1) * d];
        let cov = &mut covs[j * cov_len..(j + 1) * cov_len];
        if nk[j] <= floor {
            // dead component: restart it at a random data point with unit spread
            let p = rng.below(n);
            mean.copy_from_slice(x.row(p));
            for a in 0..d {
                match opts.covariance {
                    CovarianceKind::Full => cov[a * d + a] = 1.0,
                    CovarianceKind::Diagonal => cov[a] = 1.0,
                }
            }
            nk[j] = n as f64 / k as f64;
            *reinitialized += 1;
            log::warn!("gmm component {j} lost all responsibility mass; reinitialized at point {p}");
            continue;
        }
        for (i, row) in x.rows().enumerate() {
            let r = resp[i * k + j];
            for a in 0..d {
                mean[a] += r * row[a];
            }
        }
        for m in mean.iter_mut() {
            *m /= nk[j];
        }
        for (i, row) in x.rows().enumerate() {
            let r = resp[i * k + j];
            if r == 0.0 {
                continue;
            }
            match opts.covariance {
                CovarianceKind::Full => {
                    for a in 0..d {
                        let da = row[a] - mean[a];
                        for b in 0..=a {
                            cov[a * d + b] += r * da * (row[b] - mean[b]);
                        }
                    }
                }
                CovarianceKind::Diagonal => {
                    for a in 0..d {
                        let da = row[a] - mean[a];
                        cov[a] += r * da * da;
                    }
                }
            }
        }
        match opts.covariance {
            CovarianceKind::Full => {
                for a in 0..d {
                    for b in 0..=a {
                        let v = cov[a * d + b] / nk[j];
                        cov[a * d + b] = v;
                        cov[b * d + a] = v;
                    }
                    cov[a * d + a] += opts.reg_covar;
                }
            }
            CovarianceKind::Diagonal => {
                for v in cov.iter_mut() {
                    *v = *v / nk[j] + opts.reg_covar;
                }
            }
        }
    }
    let total: f64 = nk.iter().sum();
    let weights = nk.iter().map(|v| v / total).collect();
    let cov_shape = match opts.covariance {
        CovarianceKind::Full => vec![k, d, d],
        CovarianceKind::Diagonal => vec![k, d],
    };
    Ok(GmmParams {
        kind: opts.covariance,
        weights,
        means: Tensor::new(vec![k, d], means)?,
        covariances: Tensor::new(cov_shape, covs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_blobs(rng: &mut Rng, n: usize) -> (Tensor, [[f64; 2]; 2]) {
        let centers = [[-3.0, 1.0], [4.0, -2.0]];
        let mut data = Vec::new();
        for i in 0..n {
            let c = centers[i % 2];
            data.push(c[0] + 0.5 * rng.normal());
            data.push(c[1] + 0.5 * rng.normal());
        }
        (Tensor::new(vec![n, 2], data).unwrap(), centers)
    }

    #[test]
    fn single_component_is_sample_moments() {
        let mut rng = Rng::new(3);
        let x = Tensor::randn(&[200, 3], &mut rng);
        let opts = GmmOptions { components: 1, ..Default::default() };
        let fit = fit_gmm_em(&x, &opts, &mut rng).unwrap();
        let (mean, cov) = super::super::mean_and_covariance(&x, 0).unwrap();
        for (a, b) in fit.params.means.data().iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in fit.params.covariances.data().iter().zip(cov.data().iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!((fit.params.weights[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn separated_clusters_recovered() {
        let mut rng = Rng::new(11);
        let (x, centers) = two_blobs(&mut rng, 600);
        let opts = GmmOptions { components: 2, ..Default::default() };
        let fit = fit_gmm_em(&x, &opts, &mut rng).unwrap();
        for c in centers {
            let best = (0..2)
                .map(|k| sq_dist(fit.params.means.row(k), &c).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.1, "{best}");
        }
        let s: f64 = fit.params.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_trace_non_decreasing() {
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let x = Tensor::randn(&[150, 2], &mut rng).map(|v| v * v);
            for kind in [CovarianceKind::Full, CovarianceKind::Diagonal] {
                let opts = GmmOptions { components: 4, covariance: kind, ..Default::default() };
                let fit = fit_gmm_em(&x, &opts, &mut rng).unwrap();
                assert_eq!(fit.reinitialized, 0);
                for w in fit.log_likelihood.windows(2) {
                    assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{w:?}");
                }
            }
        }
    }

    #[test]
    fn k_one_standard_normal_density() {
        let params = GmmParams {
            kind: CovarianceKind::Full,
            weights: vec![1.0],
            means: Tensor::zeros(&[1, 2]),
            covariances: Tensor::eye(2).reshape(&[1, 2, 2]).unwrap(),
        };
        let z = Tensor::from_rows(&[[0.3, -1.2]]).unwrap();
        let expect = -LN_2PI - 0.5 * (0.09 + 1.44);
        assert!((gmm_log_density(&params, &z).unwrap()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn too_few_points_rejected() {
        let x = Tensor::zeros(&[3, 2]);
        let opts = GmmOptions { components: 5, ..Default::default() };
        assert!(fit_gmm_em(&x, &opts, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn serializes_flat_covariances() {
        let params = GmmParams {
            kind: CovarianceKind::Diagonal,
            weights: vec![0.5, 0.5],
            means: Tensor::zeros(&[2, 1]),
            covariances: Tensor::ones(&[2, 1]),
        };
        let s = serde_json::to_string(&params).unwrap();
        let back: GmmParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, params);
    }
}
