use serde::{Deserialize, Serialize};

use crate::tensor::Var;
use crate::{Error, Result};

/// Scales of the inverse multiquadratic kernel sum.
pub const IMQ_SCALES: [f64; 7] = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Rbf,
    Imq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdKernelSpec {
    pub kind: KernelKind,
    pub sigma: f64,
    pub latent_dim: usize,
    pub imq_scales: Vec<f64>,
}

impl MmdKernelSpec {
    pub fn new(kind: KernelKind, sigma: f64, latent_dim: usize) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::invalid(format!("kernel bandwidth must be > 0, got {sigma}")));
        }
        Ok(MmdKernelSpec {
            kind,
            sigma,
            latent_dim,
            imq_scales: IMQ_SCALES.to_vec(),
        })
    }

    /// IMQ base constant `C = 2·d·σ²`.
    pub fn imq_constant(&self) -> f64 {
        2.0 * self.latent_dim as f64 * self.sigma * self.sigma
    }

    /// Kernel value for one pair of points.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        self.of_sq_dist(d2)
    }

    fn of_sq_dist(&self, d2: f64) -> f64 {
        match self.kind {
            KernelKind::Rbf => (-d2 / (2.0 * self.sigma * self.sigma)).exp(),
            KernelKind::Imq => {
                let c = self.imq_constant();
                self.imq_scales.iter().map(|s| s * c / (s * c + d2)).sum()
            }
        }
    }

    /// Gram matrix `[n×m]` between the rows of `x` and `y`.
    pub fn gram<'g>(&self, x: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
        let d2 = pairwise_sq_dist(x, y)?;
        match self.kind {
            KernelKind::Rbf => Ok(d2.mul_scalar(-1.0 / (2.0 * self.sigma * self.sigma)).exp()),
            KernelKind::Imq => {
                let c = self.imq_constant();
                let mut acc: Option<Var<'g>> = None;
                for &s in &self.imq_scales {
                    let term = d2.add_scalar(s * c).pow(-1.0)?.mul_scalar(s * c);
                    acc = Some(match acc {
                        Some(a) => a.add(term)?,
                        None => term,
                    });
                }
                acc.ok_or_else(|| Error::invalid("IMQ kernel with no scales"))
            }
        }
    }
}

/// `‖x_i − y_j‖²` via the expansion `‖x‖² + ‖y‖² − 2 x·y`, floored at 0.
pub fn pairwise_sq_dist<'g>(x: Var<'g>, y: Var<'g>) -> Result<Var<'g>> {
    let cross = x.matmul(y.transpose()?)?;
    let xx = x.square().sum_axis(1)?;
    let yy = y.square().sum_axis(1)?;
    let d2 = cross.mul_scalar(-2.0).add(yy)?.add_rows(xx)?;
    Ok(d2.clamp(0.0, f64::INFINITY))
}

/// Biased (V-statistic) MMD²: `mean k(X,X) + mean k(Y,Y) − 2 mean k(X,Y)`.
pub fn mmd<'g>(x: Var<'g>, y: Var<'g>, spec: &MmdKernelSpec) -> Result<Var<'g>> {
    let (n, m) = (x.shape()[0], y.shape()[0]);
    if n < 2 || m < 2 {
        return Err(Error::invalid(format!("mmd needs at least 2 samples per set, got {n} and {m}")));
    }
    let kxx = spec.gram(x, x)?.mean();
    let kyy = spec.gram(y, y)?.mean();
    let kxy = spec.gram(x, y)?.mean();
    kxx.add(kyy)?.sub(kxy.mul_scalar(2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Rng, Tensor};

    #[test]
    fn imq_self_similarity_is_number_of_scales() {
        let spec = MmdKernelSpec::new(KernelKind::Imq, 1.3, 4).unwrap();
        assert_eq!(spec.eval(&[0.2, 1.0, -3.0, 4.0], &[0.2, 1.0, -3.0, 4.0]), 7.0);
    }

    #[test]
    fn mmd_of_identical_sets_is_zero() {
        let mut rng = Rng::new(4);
        let x = Tensor::randn(&[10, 3], &mut rng);
        for kind in [KernelKind::Rbf, KernelKind::Imq] {
            let spec = MmdKernelSpec::new(kind, 1.0, 3).unwrap();
            let g = Graph::new();
            let v = mmd(g.constant(x.clone()), g.constant(x.clone()), &spec).unwrap();
            assert_eq!(v.item(), 0.0);
        }
    }

    #[test]
    fn gram_matches_pairwise_eval() {
        let mut rng = Rng::new(5);
        let x = Tensor::randn(&[4, 2], &mut rng);
        let y = Tensor::randn(&[3, 2], &mut rng);
        for kind in [KernelKind::Rbf, KernelKind::Imq] {
            let spec = MmdKernelSpec::new(kind, 0.8, 2).unwrap();
            let g = Graph::new();
            let k = spec.gram(g.constant(x.clone()), g.constant(y.clone())).unwrap().value();
            for i in 0..4 {
                for j in 0..3 {
                    let e = spec.eval(x.row(i), y.row(j));
                    assert!((k.data()[i * 3 + j] - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        let g = Graph::new();
        let spec = MmdKernelSpec::new(KernelKind::Rbf, 1.0, 2).unwrap();
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let y = g.constant(Tensor::zeros(&[5, 2]));
        assert!(mmd(x, y, &spec).is_err());
        assert!(MmdKernelSpec::new(KernelKind::Rbf, 0.0, 2).is_err());
    }
}
