use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::stats::{frechet_gaussian, mean_and_covariance};
use crate::tensor::{Rng, Tensor};
use crate::{Error, Result};

pub const DEFAULT_FEATURE_DIM: usize = 64;
pub const EIGENVALUE_FLOOR: f64 = 1e-10;

/// Fixed random embedding `tanh(W·(x − ½)/√D + b)` used in place of a
/// pretrained network when comparing image distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub seed: u64,
    /// `[D×k]`
    pub projection: Tensor,
    pub bias: Vec<f64>,
}

const GAIN: f64 = 0.5;

impl FeatureMap {
    pub fn new(input_dim: usize, feature_dim: usize, seed: u64) -> Result<FeatureMap> {
        if input_dim == 0 || feature_dim == 0 {
            return Err(Error::invalid("feature map dimensions must be positive"));
        }
        let mut rng = Rng::new(seed);
        let scale = GAIN / (input_dim as f64).sqrt();
        let projection = Tensor::randn(&[input_dim, feature_dim], &mut rng).map(|v| v * scale);
        let bias = (0..feature_dim).map(|_| rng.uniform() - 0.5).collect();
        Ok(FeatureMap { seed, projection, bias })
    }

    pub fn input_dim(&self) -> usize {
        self.projection.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.shape()[1]
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (d, k) = (self.input_dim(), self.feature_dim());
        if x.rank() != 2 || x.shape()[1] != d {
            return Err(Error::ShapeMismatch {
                op: "feature_map",
                lhs: x.shape().to_vec(),
                rhs: vec![d],
            });
        }
        let w = self.projection.data();
        let mut out = Vec::with_capacity(x.shape()[0] * k);
        for row in x.rows() {
            let mut acc = self.bias.clone();
            for (i, &xi) in row.iter().enumerate() {
                let c = xi - 0.5;
                for (a, wij) in acc.iter_mut().zip(&w[i * k..(i + 1) * k]) {
                    *a += c * wij;
                }
            }
            out.extend(acc.into_iter().map(f64::tanh));
        }
        Tensor::new(vec![x.shape()[0], k], out)
    }
}

fn floor_eigenvalues(cov: &Tensor) -> Tensor {
    let d = cov.shape()[0];
    let m = DMatrix::from_row_slice(d, d, cov.data());
    let eig = SymmetricEigen::new(m);
    let vals = eig.eigenvalues.map(|v| v.max(EIGENVALUE_FLOOR));
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let data = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| 0.5 * (r[(i, j)] + r[(j, i)])).collect();
    Tensor::new(vec![d, d], data).expect("square matrix")
}

/// Fréchet distance between Gaussians fitted to the features of two image sets.
pub fn frechet_feature_distance(a: &Tensor, b: &Tensor, fmap: &FeatureMap) -> Result<f64> {
    let (fa, fb) = (fmap.apply(a)?, fmap.apply(b)?);
    let (ma, ca) = mean_and_covariance(&fa, 1)?;
    let (mb, cb) = mean_and_covariance(&fb, 1)?;
    frechet_gaussian(&ma, &floor_eigenvalues(&ca), &mb, &floor_eigenvalues(&cb))
}
