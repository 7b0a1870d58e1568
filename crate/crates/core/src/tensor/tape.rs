//! Define-by-run reverse-mode differentiation.
//!
//! Every forward op appends one node to the [`Tape`]; nodes only refer to
//! earlier nodes, so the node vector is already in topological order and the
//! backward pass is a single reverse sweep that visits each node once.

use crate::error::{Error, Result};

use super::broadcast::BinaryPlan;
use super::kernels::{self, MatmulPlan};
use super::{numel, Tensor};

/// Sentinel in gather/scatter index maps meaning "no source element".
pub const NO_INDEX: usize = usize::MAX;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-pass corruptions, used to confirm that the gradient
/// checks are able to catch a broken derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// `abs` propagates `-sign(x)` instead of `sign(x)`.
    AbsBackwardNegated,
}

impl std::str::FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs-backward-negated" => Ok(Fault::AbsBackwardNegated),
            _ => Err(Error::Config(format!(
                "unknown fault {s:?}; known: abs-backward-negated"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Ln,
    Square,
    Recip,
    Relu,
    Abs,
    Sigmoid,
    Softplus,
}

impl Unary {
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Square => x * x,
            Unary::Recip => 1.0 / x,
            Unary::Relu => x.max(0.0),
            Unary::Abs => x.abs(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::Recip => -y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            // subgradient 0 at the kink
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, BinaryPlan),
    Sub(Var, Var, BinaryPlan),
    Mul(Var, Var, BinaryPlan),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Matmul(Var, Var, MatmulPlan),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    ConcatLast(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Gather(Var, Vec<usize>),
    ScatterAdd(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
///
/// A tape is rebuilt for every forward pass and is a single-threaded unit of
/// work; independent tapes may run concurrently.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`; panics if `v` does not require gradients.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).unwrap_or_else(|| panic!("no gradient recorded for {v:?}"))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupts one backward rule. Only meant for mutation testing.
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, BinaryPlan)> {
        let (av, bv) = (self.value(a), self.value(b));
        let plan = BinaryPlan::new(name, av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let mut data = vec![0.0; plan.len()];
        plan.zip(|o, i, j| data[o] = f(ad[i], bd[j]));
        Ok((Tensor::new(plan.out_shape.clone(), data)?, plan))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, plan) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b, plan), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, plan) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b, plan), &[a, b]))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, plan) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b, plan), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::AddScalar(a), &[a])
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let t = self.value(a).map(|x| kind.forward(x));
        self.push(t, Op::Unary(a, kind), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let plan = MatmulPlan::new(av.shape(), bv.shape())?;
        let mut out = vec![0.0; numel(&plan.out_shape)];
        plan.forward(av.data(), bv.data(), &mut out);
        let t = Tensor::new(plan.out_shape.clone(), out)?;
        Ok(self.push(t, Op::Matmul(a, b, plan), &[a, b]))
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = *x.shape().last().unwrap();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Normalizes the last axis to zero mean and unit variance (`eps` inside
    /// the square root), then applies `gain` and `bias` of shape `[D]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Domain(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", xv.shape(), self.shape(p)));
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..][..d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a).permute(perm)?;
        Ok(self.push(t, Op::Permute(a, perm.to_vec()), &[a]))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(Error::Contract(format!(
                "transpose_last2 needs rank >= 2, got {:?}",
                self.shape(a)
            )));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_last of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat_last", self.shape(*first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..][..w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatLast(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.numel() as f64);
        self.push(t, Op::Mean(a), &[a])
    }

    /// `out[o] = a[index[o]]`, or 0 where `index[o] == NO_INDEX`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if index.len() != numel(shape) || index.iter().any(|&i| i != NO_INDEX && i >= src.len()) {
            return Err(Error::Contract(format!(
                "gather index map does not fit source {:?} / target {shape:?}",
                self.shape(a)
            )));
        }
        let data = index
            .iter()
            .map(|&i| if i == NO_INDEX { 0.0 } else { src[i] })
            .collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t, Op::Gather(a, index), &[a]))
    }

    /// `out[index[i]] += a[i]`, skipping `NO_INDEX`; the adjoint of [`Tape::gather`].
    pub fn scatter_add(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        let n = numel(shape);
        if index.len() != src.len() || index.iter().any(|&i| i != NO_INDEX && i >= n) {
            return Err(Error::Contract(format!(
                "scatter index map does not fit source {:?} / target {shape:?}",
                self.shape(a)
            )));
        }
        let mut data = vec![0.0; n];
        for (&i, &v) in index.iter().zip(src) {
            if i != NO_INDEX {
                data[i] += v;
            }
        }
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t, Op::ScatterAdd(a, index), &[a]))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate across every
    /// use of a node; every trainable leaf gets a gradient, zero if unreached.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(d) => Tensor::new(shape, d).expect("gradient shape"),
                    None => Tensor::zeros(shape),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, plan) | Op::Sub(a, b, plan) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = self.slot(grads, *a) {
                    plan.zip(|o, i, _| ga[i] += g[o]);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    plan.zip(|o, _, j| gb[j] += sign * g[o]);
                }
            }
            Op::Mul(a, b, plan) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    plan.zip(|o, i, j| ga[i] += g[o] * bd[j]);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    plan.zip(|o, i, j| gb[j] += g[o] * ad[i]);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += c * gv;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv;
                    }
                }
            }
            Op::Unary(a, kind) => {
                let negate_abs = matches!(kind, Unary::Abs) && self.fault == Some(Fault::AbsBackwardNegated);
                let xs = self.value(*a).data();
                let ys = node.value.data();
                if let Some(ga) = self.slot(grads, *a) {
                    for j in 0..g.len() {
                        let mut d = kind.derivative(xs[j], ys[j]);
                        if negate_abs {
                            d = -d;
                        }
                        ga[j] += g[j] * d;
                    }
                }
            }
            Op::Matmul(a, b, plan) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    plan.backward_lhs(bd, g, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    plan.backward_rhs(ad, g, gb);
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((gr, yr), gar) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *node.value.shape().last().unwrap();
                let gn = self.value(*gain).data();
                if let Some(gg) = self.slot(grads, *gain) {
                    for (r, gr) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] += gr[j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, gr) in g.chunks(d).enumerate() {
                        let xh = &xhat[r * d..][..d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gn[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xh[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inverse[p] = k;
                }
                let out_shape = node.value.shape().to_vec();
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::permute_into(g, &out_shape, &inverse, ga, true);
                }
            }
            Op::ConcatLast(parts) => {
                let total = *node.value.shape().last().unwrap();
                let rows = g.len() / total;
                let mut start = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + start + j];
                            }
                        }
                    }
                    start += w;
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Gather(a, index) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (&i, &gv) in index.iter().zip(g) {
                        if i != NO_INDEX {
                            ga[i] += gv;
                        }
                    }
                }
            }
            Op::ScatterAdd(a, index) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (x, &i) in ga.iter_mut().zip(index) {
                        if i != NO_INDEX {
                            *x += g[i];
                        }
                    }
                }
            }
        }
    }

    /// Mutable gradient buffer for `v`, allocated on first use; `None` when
    /// `v` does not participate in differentiation.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }
}
