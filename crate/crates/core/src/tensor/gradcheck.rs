use super::{Graph, Tensor, Var};
use crate::Result;

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords(f, point, eps, &coords)
}

/// [`grad_check`] restricted to a subset of flat coordinates.
pub fn grad_check_coords<F>(f: F, point: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let analytic = {
        let g = Graph::new();
        let x = g.param(point.clone());
        let y = f(&g, x)?;
        g.backward(y)?;
        g.grad_or_zeros(x)
    };
    let eval = |p: &Tensor| -> Result<f64> {
        let g = Graph::new();
        let x = g.constant(p.clone());
        Ok(f(&g, x)?.item())
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    Ok(worst)
}

/// Central-difference Jacobian of a vector map `ℝⁿ → ℝᵐ`, row-major `[m×n]`.
pub fn numerical_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], eps: f64) -> Vec<Vec<f64>> {
    let m = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; m];
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        xp[j] = x[j] + eps;
        let fp = f(&xp);
        xp[j] = x[j] - eps;
        let fm = f(&xp);
        xp[j] = x[j];
        for i in 0..m {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * eps);
        }
    }
    jac
}
