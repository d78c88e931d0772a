use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ReconstructionLoss;
use crate::stats::LN_2PI;
use crate::tensor::{Rng, Tensor, Var};
use crate::{Error, Result};

/// A named auxiliary term and its weight in the total.
#[derive(Clone, Copy, Debug)]
pub struct AuxVar<'g> {
    pub name: &'static str,
    pub value: Var<'g>,
    pub weight: f64,
}

/// Differentiable loss parts. `total` is assembled from the parts by
/// [`LossTerms::assemble`], so it always recomposes exactly.
#[derive(Clone, Debug)]
pub struct LossTerms<'g> {
    pub total: Var<'g>,
    pub reconstruction: Var<'g>,
    pub regularization: Var<'g>,
    pub regularization_weight: f64,
    pub auxiliary: Vec<AuxVar<'g>>,
}

impl<'g> LossTerms<'g> {
    /// `total = reconstruction + w·regularization + Σ wᵢ·auxᵢ`.
    pub fn assemble(reconstruction: Var<'g>, regularization: Var<'g>, weight: f64, auxiliary: Vec<AuxVar<'g>>) -> Result<Self> {
        let mut total = reconstruction.add(regularization.mul_scalar(weight))?;
        for a in &auxiliary {
            total = total.add(a.value.mul_scalar(a.weight))?;
        }
        Ok(LossTerms {
            total,
            reconstruction,
            regularization,
            regularization_weight: weight,
            auxiliary,
        })
    }

    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            total: self.total.item(),
            reconstruction: self.reconstruction.item(),
            regularization: self.regularization.item(),
            regularization_weight: self.regularization_weight,
            auxiliary: self
                .auxiliary
                .iter()
                .map(|a| {
                    (
                        a.name.to_string(),
                        AuxTerm {
                            value: a.value.item(),
                            weight: a.weight,
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxTerm {
    pub value: f64,
    pub weight: f64,
}

/// Plain-number view of [`LossTerms`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub regularization: f64,
    pub regularization_weight: f64,
    pub auxiliary: BTreeMap<String, AuxTerm>,
}

impl LossBreakdown {
    /// The total rebuilt from its parts.
    pub fn recompose(&self) -> f64 {
        self.reconstruction
            + self.regularization_weight * self.regularization
            + self.auxiliary.values().map(|a| a.weight * a.value).sum::<f64>()
    }
}

/// Per-row reconstruction cost from decoder logits: summed BCE, or summed
/// squared error of `sigmoid(logits)`.
pub fn reconstruction_per_row<'g>(kind: ReconstructionLoss, logits: Var<'g>, x: Var<'g>) -> Result<Var<'g>> {
    let per_pixel = match kind {
        ReconstructionLoss::Bce => logits.softplus().sub(x.mul(logits)?)?,
        ReconstructionLoss::Mse => x.sub(logits.sigmoid())?.square(),
    };
    per_pixel.sum_axis(1)
}

/// `log N(z_b; μ_k, diag(exp lv_k))` for every pair, as `[B×K]`.
pub fn log_normal_pairwise<'g>(z: Var<'g>, mu: Var<'g>, log_var: Var<'g>) -> Result<Var<'g>> {
    let d = z.shape()[1] as f64;
    let prec = log_var.neg().exp();
    let quad = z.square().matmul(prec.transpose()?)?;
    let cross = z.matmul(mu.mul(prec)?.transpose()?)?;
    let per_k = mu.square().mul(prec)?.add(log_var)?.sum_axis(1)?;
    let inner = quad.sub(cross.mul_scalar(2.0))?.add(per_k)?;
    Ok(inner.add_scalar(d * LN_2PI).mul_scalar(-0.5))
}

/// Importance-weighted bound per column of `log_w: [L×B]`:
/// `logsumexp_l log_w − log L`.
pub fn iwae_log_bound<'g>(log_w: Var<'g>) -> Result<Var<'g>> {
    let l = log_w.shape()[0] as f64;
    Ok(log_w.logsumexp_axis(0)?.add_scalar(-l.ln()))
}

/// Shuffles every column independently across rows.
pub fn permute_dims(z: &Tensor, rng: &mut Rng) -> Tensor {
    let (n, d) = (z.shape()[0], z.shape()[1]);
    let mut out = z.clone();
    for j in 0..d {
        let perm = rng.permutation(n);
        for (i, &src) in perm.iter().enumerate() {
            out.data_mut()[i * d + j] = z.data()[src * d + j];
        }
    }
    out
}

/// Minibatch-weighted-sampling split of the KL into mutual information,
/// total correlation and dimension-wise KL, each averaged over the batch.
pub struct TcDecomposition<'g> {
    pub mutual_information: Var<'g>,
    pub total_correlation: Var<'g>,
    pub dimensionwise_kl: Var<'g>,
}

pub fn tc_decomposition<'g>(
    z: Var<'g>,
    mu: Var<'g>,
    log_var: Var<'g>,
    dataset_size: usize,
) -> Result<TcDecomposition<'g>> {
    let (b, d) = (z.shape()[0], z.shape()[1]);
    if b < 2 {
        return Err(Error::invalid("the minibatch-weighted estimator needs a batch of at least 2"));
    }
    let log_nm = ((dataset_size.max(1) * b) as f64).ln();
    let mut joint: Option<Var<'g>> = None;
    let mut log_prod: Option<Var<'g>> = None;
    for k in 0..d {
        let m = log_normal_pairwise(z.slice(1, k, k + 1)?, mu.slice(1, k, k + 1)?, log_var.slice(1, k, k + 1)?)?;
        let marginal = m.logsumexp_axis(1)?.add_scalar(-log_nm);
        joint = Some(match joint {
            Some(j) => j.add(m)?,
            None => m,
        });
        log_prod = Some(match log_prod {
            Some(s) => s.add(marginal)?,
            None => marginal,
        });
    }
    let log_qz = joint.expect("d ≥ 1").logsumexp_axis(1)?.add_scalar(-log_nm);
    let log_prod = log_prod.expect("d ≥ 1");
    let log_qzx = crate::stats::log_normal_diag(z, mu, log_var)?;
    let log_pz = crate::stats::log_standard_normal(z)?;
    Ok(TcDecomposition {
        mutual_information: log_qzx.sub(log_qz)?.mean(),
        total_correlation: log_qz.sub(log_prod)?.mean(),
        dimensionwise_kl: log_prod.sub(log_pz)?.mean(),
    })
}

/// Per-row `‖∂f/∂z‖_F²` by forward differences with step `h`.
pub fn fd_jacobian_penalty<'g, F>(f: F, z: Var<'g>, h: f64) -> Result<Var<'g>>
where
    F: Fn(Var<'g>) -> Result<Var<'g>>,
{
    let g = z.graph();
    let d = z.shape()[1];
    let base = f(z)?;
    let mut acc: Option<Var<'g>> = None;
    for k in 0..d {
        let mut step = Tensor::zeros(&[d]);
        step.data_mut()[k] = h;
        let diff = f(z.add(g.constant(step))?)?.sub(base)?.mul_scalar(1.0 / h);
        let sq = diff.square().sum_axis(1)?;
        acc = Some(match acc {
            Some(a) => a.add(sq)?,
            None => sq,
        });
    }
    acc.ok_or_else(|| Error::invalid("jacobian penalty needs latent_dim ≥ 1"))
}

/// Index of the nearest codebook row per input row; ties go to the lowest index.
pub fn nearest_codes(z: &Tensor, codebook: &Tensor) -> Vec<usize> {
    z.rows()
        .map(|r| {
            let mut best = (0, f64::INFINITY);
            for (k, c) in codebook.rows().enumerate() {
                let d2: f64 = r.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < best.1 {
                    best = (k, d2);
                }
            }
            best.0
        })
        .collect()
}

/// EMA-tracked vector-quantization codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub embeddings: Tensor,
    pub ema_cluster_size: Tensor,
    pub ema_embed_sum: Tensor,
    pub decay: f64,
    pub epsilon: f64,
}

impl Codebook {
    /// Embeddings `U(±1/K)`; the accumulators start consistent with them.
    pub fn new(k: usize, dim: usize, decay: f64, epsilon: f64, rng: &mut Rng) -> Result<Codebook> {
        if k == 0 || dim == 0 {
            return Err(Error::invalid("codebook needs K ≥ 1 and a positive embedding size"));
        }
        let bound = 1.0 / k as f64;
        let embeddings = Tensor::rand_uniform(&[k, dim], -bound, bound, rng);
        Ok(Codebook {
            ema_embed_sum: embeddings.clone(),
            ema_cluster_size: Tensor::ones(&[k]),
            embeddings,
            decay,
            epsilon,
        })
    }

    pub fn size(&self) -> usize {
        self.embeddings.shape()[0]
    }

    /// One EMA step from the slots `z_e` assigned to `indices`, followed by
    /// Laplace smoothing of the cluster sizes.
    pub fn ema_update(&mut self, z_e: &Tensor, indices: &[usize]) {
        let (k, dim) = (self.size(), self.embeddings.shape()[1]);
        let mut counts = vec![0.0; k];
        let mut sums = vec![0.0; k * dim];
        for (row, &i) in z_e.rows().zip(indices) {
            counts[i] += 1.0;
            for (s, v) in sums[i * dim..(i + 1) * dim].iter_mut().zip(row) {
                *s += v;
            }
        }
        let gamma = self.decay;
        for (n, c) in self.ema_cluster_size.data_mut().iter_mut().zip(&counts) {
            *n = gamma * *n + (1.0 - gamma) * c;
        }
        for (m, s) in self.ema_embed_sum.data_mut().iter_mut().zip(&sums) {
            *m = gamma * *m + (1.0 - gamma) * s;
        }
        let total: f64 = self.ema_cluster_size.data().iter().sum();
        let eps = self.epsilon;
        for j in 0..k {
            let n = self.ema_cluster_size.data()[j];
            let smoothed = (n + eps) / (total + k as f64 * eps) * total;
            for c in 0..dim {
                self.embeddings.data_mut()[j * dim + c] = self.ema_embed_sum.data()[j * dim + c] / smoothed;
            }
        }
    }
}

const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_SIGMA: f64 = 1.5;

/// Largest scale count (at most 5) whose coarsest level still fits the window.
pub fn max_msssim_scales(h: usize, w: usize, window: usize) -> usize {
    let side = h.min(w);
    (1..=5).rev().find(|&s| side >= window << (s - 1)).unwrap_or(0)
}

fn gaussian_taps(window: usize) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// `[HW × H'W']` matrix applying a separable valid-mode Gaussian filter.
fn filter_matrix(h: usize, w: usize, window: usize) -> Tensor {
    let taps = gaussian_taps(window);
    let (ho, wo) = (h - window + 1, w - window + 1);
    let mut m = Tensor::zeros(&[h * w, ho * wo]);
    let cols = ho * wo;
    for oi in 0..ho {
        for oj in 0..wo {
            for a in 0..window {
                for b in 0..window {
                    let src = (oi + a) * w + (oj + b);
                    m.data_mut()[src * cols + oi * wo + oj] = taps[a] * taps[b];
                }
            }
        }
    }
    m
}

/// `[HW × (H/2)(W/2)]` 2×2 average pooling, dropping odd edges.
fn pool_matrix(h: usize, w: usize) -> Tensor {
    let (ho, wo) = (h / 2, w / 2);
    let cols = ho * wo;
    let mut m = Tensor::zeros(&[h * w, cols]);
    for oi in 0..ho {
        for oj in 0..wo {
            for a in 0..2 {
                for b in 0..2 {
                    m.data_mut()[((2 * oi + a) * w + 2 * oj + b) * cols + oi * wo + oj] = 0.25;
                }
            }
        }
    }
    m
}

/// Multi-scale SSIM per row of `x, y: [B × H·W]` with values in `[0, 1]`.
/// Per-scale factors are mapped to `(v + 1)/2` before weighting so the
/// fractional powers stay defined.
pub fn msssim<'g>(x: Var<'g>, y: Var<'g>, h: usize, w: usize, window: usize, scales: usize) -> Result<Var<'g>> {
    let g = x.graph();
    if x.shape() != y.shape() || x.shape().len() != 2 || x.shape()[1] != h * w {
        return Err(Error::ShapeMismatch {
            op: "msssim",
            lhs: x.shape(),
            rhs: y.shape(),
        });
    }
    let max = max_msssim_scales(h, w, window);
    if scales == 0 || scales > max {
        return Err(Error::invalid(format!(
            "a {h}×{w} image supports at most {max} MS-SSIM scale(s) with window {window}, requested {scales}"
        )));
    }
    let weights = &MSSSIM_WEIGHTS[..scales];
    let wsum: f64 = weights.iter().sum();
    let (mut x, mut y, mut h, mut w) = (x, y, h, w);
    let mut out: Option<Var<'g>> = None;
    for (s, &wt) in weights.iter().enumerate() {
        let k = g.constant(filter_matrix(h, w, window));
        let mx = x.matmul(k)?;
        let my = y.matmul(k)?;
        let sxx = x.square().matmul(k)?.sub(mx.square())?;
        let syy = y.square().matmul(k)?.sub(my.square())?;
        let sxy = x.mul(y)?.matmul(k)?.sub(mx.mul(my)?)?;
        let cs = sxy
            .mul_scalar(2.0)
            .add_scalar(SSIM_C2)
            .div(sxx.add(syy)?.add_scalar(SSIM_C2))?;
        let last = s + 1 == scales;
        let term = if last {
            let lum = mx
                .mul(my)?
                .mul_scalar(2.0)
                .add_scalar(SSIM_C1)
                .div(mx.square().add(my.square())?.add_scalar(SSIM_C1))?;
            lum.mul(cs)?.mean_axis(1)?
        } else {
            cs.mean_axis(1)?
        };
        let factor = term.add_scalar(1.0).mul_scalar(0.5).pow(wt / wsum)?;
        out = Some(match out {
            Some(o) => o.mul(factor)?,
            None => factor,
        });
        if !last {
            let pool = g.constant(pool_matrix(h, w));
            x = x.matmul(pool)?;
            y = y.matmul(pool)?;
            h /= 2;
            w /= 2;
        }
    }
    Ok(out.expect("scales ≥ 1"))
}
