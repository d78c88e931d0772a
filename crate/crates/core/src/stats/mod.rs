//! Probability and kernel machinery: diagonal Gaussians, the closed-form KL
//! to the standard normal, reparameterized sampling, MMD kernels, Gaussian
//! mixtures fitted by EM, k-means and the Fréchet distance between Gaussians.

mod frechet;
mod gmm;
mod kmeans;
mod mmd;

use serde::{Deserialize, Serialize};

pub use frechet::{frechet_gaussian, mean_and_covariance};
pub use gmm::{fit_gmm_em, gmm_log_density, gmm_sample, CovarianceKind, GmmFit, GmmOptions, GmmParams};
pub use kmeans::{kmeans, majority_label_accuracy, KMeansRun};
pub use mmd::{mmd, KernelKind, MmdKernelSpec, IMQ_SCALES};

use crate::nn::{EncoderOutput, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::tensor::{Rng, Tensor, Var};
use crate::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian `N(mu, diag(exp(log_var)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl DiagGaussian {
    pub fn standard(d: usize) -> Self {
        DiagGaussian {
            mu: Tensor::zeros(&[d]),
            log_var: Tensor::zeros(&[d]),
        }
    }

    /// Row-wise log-density of `z: [B×d]`.
    pub fn log_density(&self, z: &Tensor) -> Result<Vec<f64>> {
        if !self.mu.all_finite() || !self.log_var.all_finite() {
            return Err(Error::NonFinite("gaussian parameters".into()));
        }
        let d = self.mu.numel();
        if z.rank() != 2 || z.shape()[1] != d || self.log_var.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "gaussian_log_density",
                lhs: z.shape().to_vec(),
                rhs: self.mu.shape().to_vec(),
            });
        }
        let (mu, lv) = (self.mu.data(), self.log_var.data());
        Ok(z
            .rows()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(i, &zi)| {
                        let diff = zi - mu[i];
                        -0.5 * (LN_2PI + lv[i] + diff * diff * (-lv[i]).exp())
                    })
                    .sum()
            })
            .collect())
    }
}

/// `Σ_i −½(log 2π + lv_i + (z_i − μ_i)² e^{−lv_i})` per row; `mu`/`log_var`
/// may be `[B×d]` or `[d]`.
pub fn log_normal_diag<'g>(z: Var<'g>, mu: Var<'g>, log_var: Var<'g>) -> Result<Var<'g>> {
    let d = *z.shape().last().unwrap_or(&1) as f64;
    let sq = z.sub(mu)?.square().mul(log_var.neg().exp())?;
    let per_dim = sq.add(log_var)?;
    let total = per_dim.sum_axis(per_dim.shape().len() - 1)?;
    Ok(total.add_scalar(d * LN_2PI).mul_scalar(-0.5))
}

/// Row-wise log-density under `N(0, I)`.
pub fn log_standard_normal<'g>(z: Var<'g>) -> Result<Var<'g>> {
    let d = *z.shape().last().unwrap_or(&1) as f64;
    let s = z.square().sum_axis(z.shape().len() - 1)?;
    Ok(s.add_scalar(d * LN_2PI).mul_scalar(-0.5))
}

/// `½ Σ_i (μ_i² + σ_i² − 1 − log σ_i²)` per row.
pub fn kl_diag_std_normal<'g>(mu: Var<'g>, log_var: Var<'g>) -> Result<Var<'g>> {
    let terms = mu.square().add(log_var.exp())?.sub(log_var)?.add_scalar(-1.0);
    Ok(terms.sum_axis(1)?.mul_scalar(0.5))
}

/// `z = μ + exp(½ log_var) ⊙ ε` with fresh `ε ~ N(0, I)`.
pub fn reparameterize<'g>(mu: Var<'g>, log_var: Var<'g>, rng: &mut Rng) -> Result<Var<'g>> {
    let eps = Tensor::randn(&mu.shape(), rng);
    reparameterize_with(mu, log_var, &eps)
}

/// Reparameterization with caller-supplied noise.
pub fn reparameterize_with<'g>(mu: Var<'g>, log_var: Var<'g>, eps: &Tensor) -> Result<Var<'g>> {
    let g = mu.graph();
    let std = log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX).mul_scalar(0.5).exp();
    mu.add(std.mul(g.constant(eps.clone()))?)
}

/// Draws `z` from an encoder output; deterministic encoders return the mean.
pub fn sample_posterior<'g>(enc: &EncoderOutput<'g>, rng: &mut Rng) -> Result<Var<'g>> {
    match enc.log_var {
        Some(lv) => reparameterize(enc.mu, lv, rng),
        None => Ok(enc.mu),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn standard_normal_at_mode() {
        let g = DiagGaussian::standard(1);
        let v = g.log_density(&Tensor::zeros(&[1, 1])).unwrap();
        assert!((v[0] + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn density_at_mean_drops_quadratic_term() {
        let gauss = DiagGaussian {
            mu: Tensor::from_vec(vec![0.3, -1.0]),
            log_var: Tensor::from_vec(vec![0.5, -0.2]),
        };
        let z = Tensor::new(vec![1, 2], vec![0.3, -1.0]).unwrap();
        let expect = -0.5 * ((LN_2PI + 0.5) + (LN_2PI - 0.2));
        assert!((gauss.log_density(&z).unwrap()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn non_finite_parameters_rejected() {
        let gauss = DiagGaussian {
            mu: Tensor::from_vec(vec![f64::NAN]),
            log_var: Tensor::from_vec(vec![0.0]),
        };
        assert!(gauss.log_density(&Tensor::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn density_integrates_to_one() {
        let gauss = DiagGaussian {
            mu: Tensor::from_vec(vec![0.4]),
            log_var: Tensor::from_vec(vec![(0.7f64).ln()]),
        };
        // midpoint rule over ±12σ
        let (lo, hi, n) = (-10.0, 10.0, 200_000);
        let h = (hi - lo) / n as f64;
        let pts: Vec<f64> = (0..n).map(|i| lo + (i as f64 + 0.5) * h).collect();
        let z = Tensor::new(vec![n, 1], pts).unwrap();
        let mass: f64 = gauss.log_density(&z).unwrap().iter().map(|l| l.exp() * h).sum();
        assert!((mass - 1.0).abs() < 1e-6, "{mass}");
    }

    #[test]
    fn graph_density_matches_plain() {
        let mut rng = Rng::new(1);
        let z = Tensor::randn(&[4, 3], &mut rng);
        let mu = Tensor::randn(&[3], &mut rng);
        let lv = Tensor::randn(&[3], &mut rng);
        let plain = DiagGaussian { mu: mu.clone(), log_var: lv.clone() }.log_density(&z).unwrap();
        let g = Graph::new();
        let v = log_normal_diag(g.constant(z), g.constant(mu), g.constant(lv)).unwrap().value();
        for (a, b) in plain.iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_hand_values() {
        let g = Graph::new();
        let mu = g.constant(Tensor::from_rows(&[[0.0], [1.0]]).unwrap());
        let lv = g.constant(Tensor::zeros(&[2, 1]));
        let kl = kl_diag_std_normal(mu, lv).unwrap().value();
        assert_eq!(kl.data()[0], 0.0);
        assert!((kl.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn clamped_log_var_gives_near_zero_noise() {
        let g = Graph::new();
        let mu = g.constant(Tensor::from_rows(&[[1.5, -2.0]]).unwrap());
        let lv = g.constant(Tensor::full(&[1, 2], -1e6));
        let z = reparameterize(mu, lv, &mut Rng::new(0)).unwrap().value();
        for (a, b) in z.data().iter().zip([1.5, -2.0]) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn reparameterize_is_reproducible() {
        let run = || {
            let g = Graph::new();
            let mu = g.constant(Tensor::zeros(&[3, 2]));
            let lv = g.constant(Tensor::zeros(&[3, 2]));
            reparameterize(mu, lv, &mut Rng::new(8)).unwrap().value()
        };
        assert_eq!(run(), run());
    }
}
