//! Normalizing flows: planar and radial maps for flowed posteriors, IAF chains
//! of MADE blocks, and the MAF density model used as an ex-post sampler.

mod iaf;
mod maf;

use serde::{Deserialize, Serialize};

pub use iaf::IafChain;
pub use maf::{MafConfig, MafModel};

use crate::nn::{Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Rng, Tensor, Var};
use crate::{Error, Result};

/// Keeps `‖z − z0‖` differentiable at `z = z0`.
const RADIUS_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowKind {
    Planar,
    Radial,
}

/// Parses a layout such as `"PRPRP"`, `"10P"` or `"2r3p"` (case-insensitive,
/// a count applies to the letter that follows it).
pub fn parse_flow_sequence(s: &str) -> Result<Vec<FlowKind>> {
    let mut out = Vec::new();
    let mut count = String::new();
    for (i, c) in s.trim().chars().enumerate() {
        if c.is_ascii_digit() {
            count.push(c);
            continue;
        }
        let kind = match c.to_ascii_uppercase() {
            'P' => FlowKind::Planar,
            'R' => FlowKind::Radial,
            _ => return Err(Error::invalid(format!("flow sequence '{s}': unexpected '{c}' at {i}"))),
        };
        let n = if count.is_empty() {
            1
        } else {
            count.parse::<usize>().map_err(|e| Error::invalid(format!("flow sequence '{s}': {e}")))?
        };
        count.clear();
        out.extend(std::iter::repeat_n(kind, n));
    }
    if !count.is_empty() {
        return Err(Error::invalid(format!("flow sequence '{s}' ends with a bare count")));
    }
    if out.is_empty() {
        return Err(Error::invalid("flow sequence is empty"));
    }
    Ok(out)
}

/// `z' = z + û·tanh(wᵀz + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarFlow {
    pub u: ParamId,
    pub w: ParamId,
    pub b: ParamId,
    pub dim: usize,
}

impl PlanarFlow {
    pub fn build(store: &mut ParamStore, name: &str, d: usize, group: ParamGroup, rng: &mut Rng) -> PlanarFlow {
        let u = store.add(format!("{name}.u"), group, Tensor::randn(&[d], rng).map(|v| 0.1 * v));
        let w = store.add(format!("{name}.w"), group, Tensor::randn(&[d], rng).map(|v| 0.1 * v));
        let b = store.add(format!("{name}.b"), group, Tensor::scalar(0.0));
        PlanarFlow { u, w, b, dim: d }
    }

    /// `û = u + (m(wᵀu) − wᵀu)·w/‖w‖²` with `m(a) = −1 + softplus(a)`, which
    /// guarantees `wᵀû > −1`.
    pub fn u_hat<'g>(&self, p: &Bound<'g>) -> Result<Var<'g>> {
        let (u, w) = (p.get(self.u), p.get(self.w));
        let wu = w.mul(u)?.sum();
        let m = wu.softplus().add_scalar(-1.0);
        let w_norm2 = w.square().sum();
        let coef = m.sub(wu)?.div(w_norm2)?;
        u.add(w.mul(coef)?)
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let bsz = z.shape()[0];
        let d = self.dim;
        let w = p.get(self.w);
        let u_hat = self.u_hat(p)?;
        let lin = z.matmul(w.reshape(&[d, 1])?)?.reshape(&[bsz])?.add(p.get(self.b))?;
        let h = lin.tanh();
        let shift = h.reshape(&[bsz, 1])?.matmul(u_hat.reshape(&[1, d])?)?;
        let wu_hat = w.mul(u_hat)?.sum();
        let slope = h.square().neg().add_scalar(1.0);
        let log_det = slope.mul(wu_hat)?.add_scalar(1.0).log()?;
        Ok((z.add(shift)?, log_det))
    }
}

/// `z' = z + β(z − z0)/(α + ‖z − z0‖)` with `α = softplus(α_raw)` and
/// `β = −α + softplus(β_raw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialFlow {
    pub z0: ParamId,
    pub alpha_raw: ParamId,
    pub beta_raw: ParamId,
    pub dim: usize,
}

impl RadialFlow {
    pub fn build(store: &mut ParamStore, name: &str, d: usize, group: ParamGroup, rng: &mut Rng) -> RadialFlow {
        let z0 = store.add(format!("{name}.z0"), group, Tensor::randn(&[d], rng).map(|v| 0.1 * v));
        let alpha_raw = store.add(format!("{name}.alpha_raw"), group, Tensor::scalar(0.1 * rng.normal()));
        let beta_raw = store.add(format!("{name}.beta_raw"), group, Tensor::scalar(0.1 * rng.normal()));
        RadialFlow {
            z0,
            alpha_raw,
            beta_raw,
            dim: d,
        }
    }

    pub fn alpha_beta<'g>(&self, p: &Bound<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let alpha = p.get(self.alpha_raw).softplus();
        let beta = p.get(self.beta_raw).softplus().sub(alpha)?;
        Ok((alpha, beta))
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let (alpha, beta) = self.alpha_beta(p)?;
        let diff = z.sub(p.get(self.z0))?;
        let r = diff.square().sum_axis(1)?.add_scalar(RADIUS_FLOOR).sqrt()?;
        let h = r.add(alpha)?.pow(-1.0)?;
        let bh = h.mul(beta)?;
        let out = z.add(diff.scale_rows(bh)?)?;
        let first = bh.add_scalar(1.0).log()?.mul_scalar(self.dim as f64 - 1.0);
        let second = bh.sub(r.mul(h.square())?.mul(beta)?)?.add_scalar(1.0).log()?;
        Ok((out, first.add(second)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Flow {
    Planar(PlanarFlow),
    Radial(RadialFlow),
}

impl Flow {
    pub fn forward<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        match self {
            Flow::Planar(f) => f.forward(p, z),
            Flow::Radial(f) => f.forward(p, z),
        }
    }
}

/// Ordered planar/radial flows with global (non-amortized) parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowChain {
    pub flows: Vec<Flow>,
    pub dim: usize,
}

impl FlowChain {
    pub fn build(store: &mut ParamStore, kinds: &[FlowKind], d: usize, rng: &mut Rng) -> Result<FlowChain> {
        if kinds.is_empty() {
            return Err(Error::invalid("flow chain needs at least one flow"));
        }
        let flows = kinds
            .iter()
            .enumerate()
            .map(|(i, k)| match k {
                FlowKind::Planar => Flow::Planar(PlanarFlow::build(store, &format!("flow.{i}.planar"), d, ParamGroup::Flow, rng)),
                FlowKind::Radial => Flow::Radial(RadialFlow::build(store, &format!("flow.{i}.radial"), d, ParamGroup::Flow, rng)),
            })
            .collect();
        Ok(FlowChain { flows, dim: d })
    }

    /// Composes the flows in order; returns `(z_K, Σ log|det|)`.
    pub fn forward<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let mut z = z;
        let mut total: Option<Var<'g>> = None;
        for f in &self.flows {
            let (next, ld) = f.forward(p, z)?;
            z = next;
            total = Some(match total {
                Some(t) => t.add(ld)?,
                None => ld,
            });
        }
        let g = z.graph();
        Ok((z, total.unwrap_or_else(|| g.constant(Tensor::zeros(&[z.shape()[0]])))))
    }
}

/// `log q(z_K) = log q(z_0) − Σ_k log|det ∂f_k/∂z|`.
pub fn flow_chain_log_density<'g>(
    p: &Bound<'g>,
    chain: &FlowChain,
    z0: Var<'g>,
    base_log_q: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let (zk, log_det) = chain.forward(p, z0)?;
    Ok((zk, base_log_q.sub(log_det)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{numerical_jacobian, Graph};

    #[test]
    fn parses_layouts() {
        use FlowKind::*;
        assert_eq!(parse_flow_sequence("PRPRP").unwrap(), vec![Planar, Radial, Planar, Radial, Planar]);
        assert_eq!(parse_flow_sequence("10P").unwrap().len(), 10);
        assert_eq!(parse_flow_sequence("rrrrr").unwrap(), vec![Radial; 5]);
        assert_eq!(parse_flow_sequence("2p1R").unwrap(), vec![Planar, Planar, Radial]);
        assert!(parse_flow_sequence("PX").is_err());
        assert!(parse_flow_sequence("3").is_err());
        assert!(parse_flow_sequence("").is_err());
    }

    #[test]
    fn zero_effective_u_is_identity() {
        let mut store = ParamStore::new();
        let f = PlanarFlow::build(&mut store, "p", 3, ParamGroup::Flow, &mut Rng::new(0));
        // û vanishes exactly when u = a·w/‖w‖² with m(a) = 0, i.e. a = ln(e − 1)
        let w = store.get(f.w).clone();
        let n2: f64 = w.data().iter().map(|v| v * v).sum();
        let a = (std::f64::consts::E - 1.0).ln();
        *store.get_mut(f.u) = w.map(|v| a * v / n2);
        let g = Graph::new();
        let p = store.bind(&g);
        let z = g.constant(Tensor::randn(&[4, 3], &mut Rng::new(1)));
        let (out, ld) = f.forward(&p, z).unwrap();
        for (a, b) in out.value().data().iter().zip(z.value().data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(ld.value().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn planar_constraint_holds_for_adversarial_u() {
        let mut store = ParamStore::new();
        let f = PlanarFlow::build(&mut store, "p", 2, ParamGroup::Flow, &mut Rng::new(0));
        *store.get_mut(f.w) = Tensor::from_vec(vec![1.0, 2.0]);
        // wᵀu = −21 keeps softplus(wᵀu) representable; far beyond that the
        // margin underflows and wᵀû rounds to exactly −1
        for (u, strict) in [(vec![-5.0, -8.0], true), (vec![-50.0, -80.0], false)] {
            *store.get_mut(f.u) = Tensor::from_vec(u);
            let g = Graph::new();
            let p = store.bind(&g);
            let wu: f64 = f.u_hat(&p).unwrap().value().data().iter().zip([1.0, 2.0]).map(|(a, b)| a * b).sum();
            assert!(if strict { wu > -1.0 } else { wu >= -1.0 - 1e-12 }, "{wu}");
        }
    }

    #[test]
    fn radial_fixed_point_and_zero_beta() {
        let mut store = ParamStore::new();
        let f = RadialFlow::build(&mut store, "r", 2, ParamGroup::Flow, &mut Rng::new(2));
        let z0 = store.get(f.z0).clone();
        let g = Graph::new();
        let p = store.bind(&g);
        let z = g.constant(z0.clone().reshape(&[1, 2]).unwrap());
        let (out, _) = f.forward(&p, z).unwrap();
        assert_eq!(out.value().data(), z0.data());

        // β = 0 ⇔ softplus(β_raw) = α
        let alpha = crate::tensor::softplus(store.get(f.alpha_raw).item());
        *store.get_mut(f.beta_raw) = Tensor::scalar(alpha.exp_m1().ln());
        let g = Graph::new();
        let p = store.bind(&g);
        let z = g.constant(Tensor::randn(&[3, 2], &mut Rng::new(3)));
        let (out, ld) = f.forward(&p, z).unwrap();
        for (a, b) in out.value().data().iter().zip(z.value().data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(ld.value().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn chain_log_det_matches_jacobian() {
        let mut store = ParamStore::new();
        let kinds = parse_flow_sequence("PRPRP").unwrap();
        let chain = FlowChain::build(&mut store, &kinds, 3, &mut Rng::new(4)).unwrap();
        let x = [0.3, -0.5, 0.9];
        let f = |v: &[f64]| {
            let g = Graph::new();
            let p = store.bind_frozen(&g);
            let z = g.constant(Tensor::new(vec![1, 3], v.to_vec()).unwrap());
            chain.forward(&p, z).unwrap().0.value().into_data()
        };
        let jac = numerical_jacobian(f, &x, 1e-6);
        let m = nalgebra::DMatrix::from_fn(3, 3, |i, j| jac[i][j]);
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let z = g.constant(Tensor::new(vec![1, 3], x.to_vec()).unwrap());
        let ld = chain.forward(&p, z).unwrap().1.item();
        assert!((ld - m.determinant().abs().ln()).abs() < 1e-6);
    }
}
