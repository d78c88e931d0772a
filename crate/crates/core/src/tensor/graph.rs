use std::cell::RefCell;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

/// Storage precision for node values.
///
/// `F32` rounds every op output (and every leaf) through `f32`, which
/// reproduces single-precision storage while keeping one code path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug)]
enum UnKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Pow(f64),
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Softplus,
    Clamp(f64, f64),
    Square,
    AddScalar(f64),
    MulScalar(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    StopGradient,
    Binary { kind: BinKind, a: usize, b: usize },
    Unary { kind: UnKind, x: usize },
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Reshape { x: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Sum { x: usize, axis: Option<usize> },
    Mean { x: usize, axis: Option<usize> },
    LogSumExp { x: usize, axis: Option<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Reverse-mode tape. Nodes are appended in creation order, which is a
/// topological order, so backward is a single reverse sweep.
///
/// A graph is confined to one thread (`RefCell` interior).
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    precision: Precision,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf node; gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let value = self.round(value);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Accumulated gradient of a `requires_grad` leaf, if backward reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient of a leaf, zeros when backward never reached it.
    pub fn grad_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.grad(var)
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Accumulates d(root)/d(leaf) into every `requires_grad` leaf.
    /// A root that does not depend on any tracked leaf is a no-op.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let root_node = &nodes[root.id];
            if root_node.value.numel() != 1 {
                return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
            }
            if !root_node.needs_grad {
                return Ok(());
            }
            let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
            adj[root.id] = Some(vec![1.0]);
            let mut leaf_grads = Vec::new();
            for id in (0..=root.id).rev() {
                let Some(g) = adj[id].take() else { continue };
                let node = &nodes[id];
                if !node.needs_grad {
                    continue;
                }
                propagate(&nodes, id, g, &mut adj, &mut leaf_grads);
            }
            leaf_grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            let node = &mut nodes[id];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn round(&self, t: Tensor) -> Tensor {
        match self.precision {
            Precision::F64 => t,
            Precision::F32 => t.map(|v| v as f32 as f64),
        }
    }

    fn push(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let value = self.round(value);
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = !matches!(op, Op::StopGradient) && parents.iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            value,
            op,
            needs_grad,
            requires_grad: false,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }
}

fn add_into(adj: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut adj[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn propagate(
    nodes: &[Node],
    id: usize,
    g: Vec<f64>,
    adj: &mut [Option<Vec<f64>>],
    leaf_grads: &mut Vec<(usize, Vec<f64>)>,
) {
    let node = &nodes[id];
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {
            if node.requires_grad {
                leaf_grads.push((id, g));
            }
        }
        Op::StopGradient => {}
        Op::Binary { kind, a, b } => {
            let (a, b) = (*a, *b);
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            let (na, nb) = (av.len(), bv.len());
            let mut ga = nodes[a].needs_grad.then(|| vec![0.0; na]);
            let mut gb = nodes[b].needs_grad.then(|| vec![0.0; nb]);
            for (i, &gi) in g.iter().enumerate() {
                let (ia, ib) = (i % na, i % nb);
                let (x, y) = (av[ia], bv[ib]);
                let (da, db) = match kind {
                    BinKind::Add => (1.0, 1.0),
                    BinKind::Sub => (1.0, -1.0),
                    BinKind::Mul => (y, x),
                    BinKind::Div => (1.0 / y, -x / (y * y)),
                    BinKind::Max => {
                        if x >= y {
                            (1.0, 0.0)
                        } else {
                            (0.0, 1.0)
                        }
                    }
                    BinKind::Min => {
                        if x <= y {
                            (1.0, 0.0)
                        } else {
                            (0.0, 1.0)
                        }
                    }
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += gi * da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += gi * db;
                }
            }
            if let Some(ga) = ga {
                add_into(adj, a, ga);
            }
            if let Some(gb) = gb {
                add_into(adj, b, gb);
            }
        }
        Op::Unary { kind, x } => {
            let xv = nodes[*x].value.data();
            let gx: Vec<f64> = g
                .iter()
                .zip(xv.iter().zip(out))
                .map(|(&gi, (&x, &y))| {
                    gi * match *kind {
                        UnKind::Neg => -1.0,
                        UnKind::Exp => y,
                        UnKind::Log => 1.0 / x,
                        UnKind::Sqrt => 0.5 / y,
                        UnKind::Pow(p) => p * x.powf(p - 1.0),
                        UnKind::Relu => {
                            if x > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnKind::LeakyRelu(s) => {
                            if x > 0.0 {
                                1.0
                            } else {
                                s
                            }
                        }
                        UnKind::Tanh => 1.0 - y * y,
                        UnKind::Sigmoid => y * (1.0 - y),
                        UnKind::Softplus => sigmoid(x),
                        UnKind::Clamp(lo, hi) => {
                            if (lo..=hi).contains(&x) {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnKind::Square => 2.0 * x,
                        UnKind::AddScalar(_) => 1.0,
                        UnKind::MulScalar(c) => c,
                    }
                })
                .collect();
            add_into(adj, *x, gx);
        }
        Op::Matmul { a, b } => {
            let (a, b) = (*a, *b);
            let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
            let n = nodes[b].value.shape()[1];
            if nodes[a].needs_grad {
                // dA = G · Bᵀ
                let gb = matmul_nt(&g, nodes[b].value.data(), m, n, k);
                add_into(adj, a, gb);
            }
            if nodes[b].needs_grad {
                // dB = Aᵀ · G
                let gb = matmul_tn(nodes[a].value.data(), &g, m, k, n);
                add_into(adj, b, gb);
            }
        }
        Op::Transpose { x } => {
            let gx = transpose_last2(&g, node.value.shape());
            add_into(adj, *x, gx);
        }
        Op::Reshape { x } => add_into(adj, *x, g),
        Op::Concat { parts, axis } => {
            let shape = node.value.shape();
            let (outer, total, inner) = axis_split(shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.shape()[*axis];
                if nodes[p].needs_grad {
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    add_into(adj, p, gp);
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let in_shape = nodes[*x].value.shape();
            let (outer, total, inner) = axis_split(in_shape, *axis);
            let len = node.value.shape()[*axis];
            let mut gx = vec![0.0; nodes[*x].value.numel()];
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            add_into(adj, *x, gx);
        }
        Op::Sum { x, axis } | Op::Mean { x, axis } => {
            let in_shape = nodes[*x].value.shape();
            let numel = nodes[*x].value.numel();
            let is_mean = matches!(node.op, Op::Mean { .. });
            let gx = match axis {
                None => {
                    let scale = if is_mean { 1.0 / numel as f64 } else { 1.0 };
                    vec![g[0] * scale; numel]
                }
                Some(axis) => {
                    let (outer, len, inner) = axis_split(in_shape, *axis);
                    let scale = if is_mean { 1.0 / len as f64 } else { 1.0 };
                    let mut gx = vec![0.0; numel];
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                gx[(o * len + k) * inner + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                    gx
                }
            };
            add_into(adj, *x, gx);
        }
        Op::LogSumExp { x, axis } => {
            let xv = nodes[*x].value.data();
            let gx = match axis {
                None => xv.iter().map(|&v| g[0] * (v - out[0]).exp()).collect(),
                Some(axis) => {
                    let (outer, len, inner) = axis_split(nodes[*x].value.shape(), *axis);
                    let mut gx = vec![0.0; xv.len()];
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                let j = (o * len + k) * inner + i;
                                let r = o * inner + i;
                                gx[j] = g[r] * (xv[j] - out[r]).exp();
                            }
                        }
                    }
                    gx
                }
            };
            add_into(adj, *x, gx);
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `[m×k]·[k×n]`.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `[m×n]·[k×n]ᵀ` → `[m×k]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `[m×k]ᵀ·[m×n]` → `[k×n]`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

/// Swaps the last two axes of a buffer with the given (input) shape.
fn transpose_last2(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batch: usize = shape[..r - 2].iter().product();
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let off = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[off + j * m + i] = data[off + i * n + j];
            }
        }
    }
    out
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value_of(self.id).shape().to_vec()
    }

    pub fn value(&self) -> Tensor {
        self.graph.value_of(self.id).clone()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        self.graph.value_of(self.id).data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].needs_grad
    }

    fn binary(self, other: Var<'g>, kind: BinKind, name: &'static str) -> Result<Var<'g>> {
        let g = self.graph;
        let value = {
            let a = g.value_of(self.id);
            let b = g.value_of(other.id);
            let (sa, sb) = (a.shape(), b.shape());
            let out_shape = if sa == sb {
                sa.to_vec()
            } else if !sb.is_empty() && &sb[1..] == sa {
                sb.to_vec()
            } else if !sa.is_empty() && &sa[1..] == sb {
                sa.to_vec()
            } else {
                return Err(Error::ShapeMismatch {
                    op: name,
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            };
            let (ad, bd) = (a.data(), b.data());
            let n: usize = out_shape.iter().product();
            let (na, nb) = (ad.len(), bd.len());
            let data = (0..n)
                .map(|i| {
                    let (x, y) = (ad[i % na], bd[i % nb]);
                    match kind {
                        BinKind::Add => x + y,
                        BinKind::Sub => x - y,
                        BinKind::Mul => x * y,
                        BinKind::Div => x / y,
                        BinKind::Max => x.max(y),
                        BinKind::Min => x.min(y),
                    }
                })
                .collect();
            Tensor::new(out_shape, data)?
        };
        Ok(g.push(
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        ))
    }

    fn unary(self, kind: UnKind) -> Var<'g> {
        let g = self.graph;
        let value = g.value_of(self.id).map(|x| match kind {
            UnKind::Neg => -x,
            UnKind::Exp => x.exp(),
            UnKind::Log => x.ln(),
            UnKind::Sqrt => x.sqrt(),
            UnKind::Pow(p) => x.powf(p),
            UnKind::Relu => x.max(0.0),
            UnKind::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            UnKind::Tanh => x.tanh(),
            UnKind::Sigmoid => sigmoid(x),
            UnKind::Softplus => softplus(x),
            UnKind::Clamp(lo, hi) => x.clamp(lo, hi),
            UnKind::Square => x * x,
            UnKind::AddScalar(c) => x + c,
            UnKind::MulScalar(c) => x * c,
        });
        g.push(value, Op::Unary { kind, x: self.id }, &[self.id])
    }

    fn check_domain(self, op: &'static str, ok: impl Fn(f64) -> bool) -> Result<()> {
        let v = self.graph.value_of(self.id);
        match v.data().iter().find(|&&x| !ok(x)) {
            Some(&bad) => Err(Error::Domain { op, value: bad }),
            None => Ok(()),
        }
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinKind::Div, "div")
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinKind::Max, "maximum")
    }

    pub fn minimum(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinKind::Min, "minimum")
    }

    pub fn neg(self) -> Var<'g> {
        self.unary(UnKind::Neg)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(UnKind::Exp)
    }

    /// Natural log; negative inputs are a domain error, zero maps to `-inf`.
    pub fn log(self) -> Result<Var<'g>> {
        self.check_domain("log", |x| x >= 0.0 || x.is_nan())?;
        Ok(self.unary(UnKind::Log))
    }

    pub fn sqrt(self) -> Result<Var<'g>> {
        self.check_domain("sqrt", |x| x >= 0.0 || x.is_nan())?;
        Ok(self.unary(UnKind::Sqrt))
    }

    /// `x^p` for a constant exponent. Negative bases need an integer `p`.
    pub fn pow(self, p: f64) -> Result<Var<'g>> {
        if p.fract() != 0.0 {
            self.check_domain("pow", |x| x >= 0.0 || x.is_nan())?;
        }
        Ok(self.unary(UnKind::Pow(p)))
    }

    pub fn square(self) -> Var<'g> {
        self.unary(UnKind::Square)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(UnKind::Relu)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.unary(UnKind::LeakyRelu(slope))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(UnKind::Tanh)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(UnKind::Sigmoid)
    }

    pub fn softplus(self) -> Var<'g> {
        self.unary(UnKind::Softplus)
    }

    /// `log σ(x) = −softplus(−x)`.
    pub fn log_sigmoid(self) -> Var<'g> {
        self.neg().softplus().neg()
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(UnKind::Clamp(lo, hi))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(UnKind::AddScalar(c))
    }

    pub fn mul_scalar(self, c: f64) -> Var<'g> {
        self.unary(UnKind::MulScalar(c))
    }

    /// Forward identity; blocks gradient flow.
    pub fn stop_gradient(self) -> Var<'g> {
        let value = self.value();
        self.graph.push(value, Op::StopGradient, &[self.id])
    }

    /// Rank-2 matrix product.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let g = self.graph;
        let value = {
            let a = g.value_of(self.id);
            let b = g.value_of(other.id);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            Tensor::new(vec![m, n], matmul_nn(a.data(), b.data(), m, k, n))?
        };
        Ok(g.push(
            value,
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g>> {
        let g = self.graph;
        let value = {
            let x = g.value_of(self.id);
            let s = x.shape();
            if s.len() < 2 {
                return Err(Error::ShapeMismatch {
                    op: "transpose",
                    lhs: s.to_vec(),
                    rhs: vec![],
                });
            }
            let mut out_shape = s.to_vec();
            let r = s.len();
            out_shape.swap(r - 2, r - 1);
            Tensor::new(out_shape, transpose_last2(x.data(), s))?
        };
        Ok(g.push(value, Op::Transpose { x: self.id }, &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.value().reshape(shape)?;
        Ok(self.graph.push(value, Op::Reshape { x: self.id }, &[self.id]))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let g = first.graph;
        let value = {
            let base = first.shape();
            if axis >= base.len() {
                return Err(Error::invalid(format!("concat axis {axis} out of range for {base:?}")));
            }
            let mut total = 0;
            for p in parts {
                let s = p.shape();
                let compatible = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: s,
                    });
                }
                total += s[axis];
            }
            let mut out_shape = base.clone();
            out_shape[axis] = total;
            let (outer, _, inner) = axis_split(&out_shape, axis);
            let mut data = Vec::with_capacity(out_shape.iter().product());
            let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
            for o in 0..outer {
                for v in &values {
                    let len = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
                }
            }
            Tensor::new(out_shape, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(g.push(value, Op::Concat { parts: ids.clone(), axis }, &ids))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'g>> {
        let value = {
            let x = self.graph.value_of(self.id);
            let s = x.shape();
            if axis >= s.len() || start > end || end > s[axis] {
                return Err(Error::invalid(format!(
                    "slice {start}..{end} on axis {axis} of shape {s:?}"
                )));
            }
            let (outer, total, inner) = axis_split(s, axis);
            let len = end - start;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * total + start) * inner;
                data.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let mut out_shape = s.to_vec();
            out_shape[axis] = len;
            Tensor::new(out_shape, data)?
        };
        Ok(self.graph.push(
            value,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    fn reduce(self, axis: Option<usize>, kind: &'static str) -> Result<Var<'g>> {
        let value = {
            let x = self.graph.value_of(self.id);
            let s = x.shape();
            match axis {
                None => {
                    let v = match kind {
                        "sum" => x.sum(),
                        "mean" => x.mean(),
                        _ => logsumexp_slice(x.data().iter().copied()),
                    };
                    Tensor::scalar(v)
                }
                Some(axis) => {
                    if axis >= s.len() {
                        return Err(Error::invalid(format!("axis {axis} out of range for {s:?}")));
                    }
                    let (outer, len, inner) = axis_split(s, axis);
                    let xd = x.data();
                    let mut data = Vec::with_capacity(outer * inner);
                    for o in 0..outer {
                        for i in 0..inner {
                            let it = (0..len).map(|k| xd[(o * len + k) * inner + i]);
                            data.push(match kind {
                                "sum" => it.sum(),
                                "mean" => it.sum::<f64>() / len as f64,
                                _ => logsumexp_slice(it),
                            });
                        }
                    }
                    let mut out_shape = s.to_vec();
                    out_shape.remove(axis);
                    Tensor::new(out_shape, data)?
                }
            }
        };
        let op = match kind {
            "sum" => Op::Sum { x: self.id, axis },
            "mean" => Op::Mean { x: self.id, axis },
            _ => Op::LogSumExp { x: self.id, axis },
        };
        Ok(self.graph.push(value, op, &[self.id]))
    }

    /// Sum of all elements (scalar result).
    pub fn sum(self) -> Var<'g> {
        self.reduce(None, "sum").expect("full reduction cannot fail")
    }

    pub fn mean(self) -> Var<'g> {
        self.reduce(None, "mean").expect("full reduction cannot fail")
    }

    pub fn logsumexp(self) -> Var<'g> {
        self.reduce(None, "lse").expect("full reduction cannot fail")
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        self.reduce(Some(axis), "sum")
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        self.reduce(Some(axis), "mean")
    }

    /// Max-shifted log-sum-exp over `axis`.
    pub fn logsumexp_axis(self, axis: usize) -> Result<Var<'g>> {
        self.reduce(Some(axis), "lse")
    }

    /// Scales row `b` of a `[B×…]` tensor by `weights[b]`.
    pub fn scale_rows(self, weights: Var<'g>) -> Result<Var<'g>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: shape,
                rhs: weights.shape(),
            });
        }
        self.transpose()?.mul(weights)?.transpose()
    }

    /// Adds `col[b]` to every element of row `b`.
    pub fn add_rows(self, col: Var<'g>) -> Result<Var<'g>> {
        self.transpose()?.add(col)?.transpose()
    }
}

fn logsumexp_slice(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m == f64::INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}
