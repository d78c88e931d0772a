use nalgebra::{DMatrix, SymmetricEigen};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Row mean and covariance of `[N×d]` data, normalized by `N − ddof`.
pub fn mean_and_covariance(data: &Tensor, ddof: usize) -> Result<(Vec<f64>, Tensor)> {
    if data.rank() != 2 {
        return Err(Error::invalid(format!("expected [N×d] data, got {:?}", data.shape())));
    }
    let (n, d) = (data.shape()[0], data.shape()[1]);
    if n <= ddof {
        return Err(Error::invalid(format!("{n} samples is too few for ddof={ddof}")));
    }
    let mut mean = vec![0.0; d];
    for r in data.rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for r in data.rows() {
        for a in 0..d {
            let da = r[a] - mean[a];
            for b in 0..=a {
                cov[a * d + b] += da * (r[b] - mean[b]);
            }
        }
    }
    let denom = (n - ddof) as f64;
    for a in 0..d {
        for b in 0..=a {
            let v = cov[a * d + b] / denom;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok((mean, Tensor::new(vec![d, d], cov)?))
}

fn as_symmetric(name: &str, t: &Tensor, d: usize) -> Result<DMatrix<f64>> {
    if t.shape() != [d, d] {
        return Err(Error::ShapeMismatch {
            op: "frechet_gaussian",
            lhs: t.shape().to_vec(),
            rhs: vec![d, d],
        });
    }
    if !t.all_finite() {
        return Err(Error::NonFinite(format!("{name} covariance")));
    }
    let m = DMatrix::from_row_slice(d, d, t.data());
    let asym = (&m - m.transpose()).amax();
    if asym > 1e-12 * m.amax().max(1.0) {
        log::warn!("{name} covariance is not symmetric (max asymmetry {asym:e}); symmetrizing");
    }
    Ok((&m + m.transpose()) * 0.5)
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ1 − μ2‖² + Tr(Σ1 + Σ2 − 2(Σ1Σ2)^{1/2})`.
///
/// The cross term uses `Tr((√Σ1 Σ2 √Σ1)^{1/2})`, which equals the trace of
/// `(Σ1Σ2)^{1/2}` but only needs symmetric eigendecompositions.
pub fn frechet_gaussian(mu1: &[f64], cov1: &Tensor, mu2: &[f64], cov2: &Tensor) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d {
        return Err(Error::ShapeMismatch {
            op: "frechet_gaussian",
            lhs: vec![d],
            rhs: vec![mu2.len()],
        });
    }
    let a = as_symmetric("first", cov1, d)?;
    let b = as_symmetric("second", cov2, d)?;
    let mean_term: f64 = mu1.iter().zip(mu2).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = psd_sqrt(a.clone());
    let inner = &sa * &b * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((mean_term + a.trace() + b.trace() - 2.0 * cross).max(0.0))
}
