//! Reverse-mode differentiation over whole tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and enough context to apply its gradient rule. [`Tape::backward`]
//! walks the nodes in reverse creation order; because every input of a node
//! was created before it, a single sweep suffices.
//!
//! Parameters enter the tape through [`Tape::param`], which remembers the
//! store index so the resulting [`Adjoints`] can be folded into
//! [`Gradients`](crate::params::Gradients).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{self, gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
    Gelu,
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(Self::Identity),
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            "tanh" => Ok(Self::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Gradient rules that can be deliberately miscomputed, for exercising the
/// gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    MatMul,
    Sigmoid,
    Softmax,
    LayerNorm,
    Propagate,
}

impl FaultKind {
    pub const ALL: [FaultKind; 5] = [FaultKind::MatMul, FaultKind::Sigmoid, FaultKind::Softmax, FaultKind::LayerNorm, FaultKind::Propagate];
}

impl std::str::FromStr for FaultKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "matmul" => Ok(FaultKind::MatMul),
            "sigmoid" => Ok(FaultKind::Sigmoid),
            "softmax" => Ok(FaultKind::Softmax),
            "layernorm" | "layer-norm" => Ok(FaultKind::LayerNorm),
            "propagate" => Ok(FaultKind::Propagate),
            other => Err(Error::Config(format!("unknown fault `{other}`"))),
        }
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Propagate { adj: Arc<Tensor>, h: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat(Var, Var),
    SliceLast { a: Var, start: usize },
    Permute { a: Var, perm: Vec<usize> },
    Reshape(Var),
    MeanAxis { a: Var, axis: usize },
    Mix { g: Var, t: Var, gamma: Var },
    MixConst { g: Var, t: Var, gamma: f64 },
    Sum(Var),
    Mse { pred: Var, target: Vec<f64> },
}

impl Op {
    fn fault_kind(&self) -> Option<FaultKind> {
        match self {
            Op::MatMul(..) | Op::Bmm { .. } => Some(FaultKind::MatMul),
            Op::Sigmoid(_) => Some(FaultKind::Sigmoid),
            Op::Softmax(_) => Some(FaultKind::Softmax),
            Op::LayerNorm { .. } => Some(FaultKind::LayerNorm),
            Op::Propagate { .. } => Some(FaultKind::Propagate),
            _ => None,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<(usize, Var)>,
    fault: Option<FaultKind>,
}

/// Gradients of a scalar with respect to the tape's leaves and parameters.
pub struct Adjoints {
    grads: Vec<Option<Vec<f64>>>,
    param_vars: Vec<(usize, Var)>,
}

impl Adjoints {
    /// Gradient with respect to a leaf or parameter variable. Interior nodes
    /// are released during the sweep and report `None`.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn into_gradients(mut self, n_params: usize) -> Gradients {
        let mut out = vec![None; n_params];
        for (idx, var) in &self.param_vars {
            if let Some(g) = self.grads[var.0].take() {
                match &mut out[*idx] {
                    slot @ None => *slot = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b): (&mut f64, &f64)| *a += b),
                }
            }
        }
        Gradients { slots: out }
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Miscompute the gradient rule of `kind` (scaled by 1.1). Only for
    /// exercising the gradient checker.
    pub fn corrupt_rule(&mut self, kind: FaultKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Brings a stored parameter onto the tape; repeated requests for the
    /// same name return the same variable.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store.require(name)?;
        if let Some((_, v)) = self.param_vars.iter().find(|(i, _)| *i == idx) {
            return Ok(*v);
        }
        let v = self.push(store.by_index(idx).value.clone(), Op::Param);
        self.param_vars.push((idx, v));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Batched product over the leading axis: `[B×m×k]·[B×k×n]`, or
    /// `[B×m×k]·[B×n×k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = Tensor::zeros([bsz, m, n]);
        {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            let od = out.data_mut();
            for i in 0..bsz {
                let ai = &av[i * m * k..(i + 1) * m * k];
                let bi = &bv[i * k * n..(i + 1) * k * n];
                let (rs, cs) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                gemm(m, k, n, ai, k as isize, 1, bi, rs, cs, 0.0, &mut od[i * m * n..(i + 1) * m * n]);
            }
        }
        Ok(self.push(out, Op::Bmm { a, b, trans_b }))
    }

    /// `adj · h[s]` for every leading slice `s` of `h: [..., N, d]`, with a
    /// constant `adj: [N×N]`.
    pub fn propagate(&mut self, adj: Arc<Tensor>, h: Var) -> Result<Var> {
        let sh = self.shape(h);
        let r = sh.len();
        if adj.rank() != 2 || r < 2 || adj.shape()[1] != sh[r - 2] || adj.shape()[0] != adj.shape()[1] {
            return Err(Error::shape("propagate", adj.shape(), sh));
        }
        let (n, d) = (sh[r - 2], sh[r - 1]);
        let slices = self.value(h).len() / (n * d).max(1);
        let mut out = Tensor::zeros(sh.to_vec());
        {
            let hv = self.nodes[h.0].value.data();
            let od = out.data_mut();
            for s in 0..slices {
                let off = s * n * d;
                gemm(n, n, d, adj.data(), n as isize, 1, &hv[off..off + n * d], d as isize, 1, 0.0, &mut od[off..off + n * d]);
            }
        }
        Ok(self.push(out, Op::Propagate { adj, h }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `[d]` row vector to every row of `a: [..., d]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        if self.shape(row) != [d] {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let mut out = self.value(a).clone();
        let r = self.nodes[row.0].value.data();
        for chunk in out.data_mut().chunks_mut(d.max(1)) {
            chunk.iter_mut().zip(r).for_each(|(x, b)| *x += b);
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Adds a constant whose shape is a suffix of `a`'s shape, tiled over the
    /// remaining leading axes.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let sa = self.shape(a);
        let sc = c.shape();
        if sc.len() > sa.len() || sa[sa.len() - sc.len()..] != *sc {
            return Err(Error::shape("add_const", sa, sc));
        }
        let mut out = self.value(a).clone();
        let n = c.len().max(1);
        for chunk in out.data_mut().chunks_mut(n) {
            chunk.iter_mut().zip(c.data()).for_each(|(x, b)| *x += b);
        }
        Ok(self.push(out, Op::AddConst(a)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = tensor::sigmoid(self.value(a));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu_parts(x).0);
        self.push(out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::Identity => a,
            Activation::Relu => self.relu(a),
            Activation::Gelu => self.gelu(a),
            Activation::Tanh => self.tanh(a),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = tensor::softmax_rows(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (out, xhat, inv_std) = tensor::layer_norm_parts(
            self.value(x),
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        );
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    pub fn concat_lastdim(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::concat_lastdim(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        let d = src.last_dim();
        if start + len > d {
            return Err(Error::shape("slice_last", src.shape(), &[start, len]));
        }
        let mut shape = src.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let data: Vec<f64> = src
            .data()
            .chunks(d.max(1))
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SliceLast { a, start }))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = tensor::permute(self.value(a), perm)?;
        Ok(self.push(out, Op::Permute { a, perm: perm.to_vec() }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if axis >= sh.len() || sh[axis] == 0 {
            return Err(Error::shape("mean_axis", &sh, &[axis]));
        }
        let outer: usize = sh[..axis].iter().product();
        let n = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= n as f64);
        let mut shape = sh.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::MeanAxis { a, axis }))
    }

    /// Elementwise convex mixture `gamma·g + (1−gamma)·t`. The result is
    /// clamped into the interval spanned by `g` and `t` so rounding never
    /// leaves it; the endpoints `gamma ∈ {0, 1}` return a branch unchanged.
    pub fn mix(&mut self, g: Var, t: Var, gamma: Var) -> Result<Var> {
        self.same_shape("mix", g, t)?;
        self.same_shape("mix", g, gamma)?;
        let (gv, tv, yv) = (self.value(g).data(), self.value(t).data(), self.value(gamma).data());
        let data = (0..gv.len()).map(|i| mix_scalar(yv[i], gv[i], tv[i])).collect();
        let out = Tensor::new(self.shape(g).to_vec(), data)?;
        Ok(self.push(out, Op::Mix { g, t, gamma }))
    }

    pub fn mix_const(&mut self, g: Var, t: Var, gamma: f64) -> Result<Var> {
        self.same_shape("mix", g, t)?;
        let (gv, tv) = (self.value(g).data(), self.value(t).data());
        let data = (0..gv.len()).map(|i| mix_scalar(gamma, gv[i], tv[i])).collect();
        let out = Tensor::new(self.shape(g).to_vec(), data)?;
        Ok(self.push(out, Op::MixConst { g, t, gamma }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean squared error against a constant target of the same length.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() || p.is_empty() {
            return Err(Error::shape("mse", p.shape(), target.shape()));
        }
        let n = p.len() as f64;
        let s = p.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse { pred, target: target.data().to_vec() }))
    }

    /// Gradient of the scalar `loss` with respect to every leaf and parameter.
    pub fn backward(&self, loss: Var) -> Result<Adjoints> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(mut g) = upper[0].take() else { continue };
            if self.fault.is_some() && node.op.fault_kind() == self.fault {
                g.iter_mut().for_each(|v| *v *= 1.1);
            }
            self.apply_rule(node, &g, lower);
        }
        Ok(Adjoints {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    /// Runs [`backward`](Self::backward) and adds the parameter gradients
    /// into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?.into_gradients(store.len());
        store.accumulate(&grads);
        Ok(())
    }

    fn apply_rule(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                // dA = G·Bᵀ, dB = Aᵀ·G
                let ga = add_into(&mut grads[a.0], m * k);
                gemm(m, n, k, g, n as isize, 1, val(*b).data(), 1, n as isize, 1.0, ga);
                let gb = add_into(&mut grads[b.0], k * n);
                gemm(k, m, n, val(*a).data(), 1, k as isize, g, n as isize, 1, 1.0, gb);
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = val(*a).shape();
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (val(*a).data(), val(*b).data());
                {
                    let ga = add_into(&mut grads[a.0], bsz * m * k);
                    for i in 0..bsz {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let gai = &mut ga[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // out = A·Bᵀ with B [n×k]: dA = G·B
                            gemm(m, n, k, gi, n as isize, 1, bi, k as isize, 1, 1.0, gai);
                        } else {
                            // B [k×n]: dA = G·Bᵀ
                            gemm(m, n, k, gi, n as isize, 1, bi, 1, n as isize, 1.0, gai);
                        }
                    }
                }
                let gb = add_into(&mut grads[b.0], bsz * k * n);
                for i in 0..bsz {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // dB [n×k] = Gᵀ·A
                        gemm(n, m, k, gi, 1, n as isize, ai, k as isize, 1, 1.0, gbi);
                    } else {
                        // dB [k×n] = Aᵀ·G
                        gemm(k, m, n, ai, 1, k as isize, gi, n as isize, 1, 1.0, gbi);
                    }
                }
            }
            Op::Propagate { adj, h } => {
                let sh = val(*h).shape();
                let r = sh.len();
                let (n, d) = (sh[r - 2], sh[r - 1]);
                let total = len(*h);
                let gh = add_into(&mut grads[h.0], total);
                for s in 0..total / (n * d).max(1) {
                    let off = s * n * d;
                    // dH = Adjᵀ·G
                    gemm(n, n, d, adj.data(), 1, n as isize, &g[off..off + n * d], d as isize, 1, 1.0, &mut gh[off..off + n * d]);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    let dst = add_into(&mut grads[v.0], g.len());
                    dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::Sub(a, b) => {
                let da = add_into(&mut grads[a.0], g.len());
                da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                let db = add_into(&mut grads[b.0], g.len());
                db.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let da = add_into(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * bv[i];
                }
                let db = add_into(&mut grads[b.0], g.len());
                for i in 0..g.len() {
                    db[i] += g[i] * av[i];
                }
            }
            Op::AddRow(a, row) => {
                let da = add_into(&mut grads[a.0], g.len());
                da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                let d = len(*row);
                let dr = add_into(&mut grads[row.0], d);
                for chunk in g.chunks(d.max(1)) {
                    dr.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                let da = add_into(&mut grads[a.0], g.len());
                da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            Op::Scale(a, f) => {
                let da = add_into(&mut grads[a.0], g.len());
                da.iter_mut().zip(g).for_each(|(d, x)| *d += f * x);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let da = add_into(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let da = add_into(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                let da = add_into(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        da[i] += g[i];
                    }
                }
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                let da = add_into(&mut grads[a.0], g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * gelu_parts(x[i]).1;
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.last_dim().max(1);
                let da = add_into(&mut grads[a.0], g.len());
                for r in 0..g.len() / c {
                    let (ys, gs) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        da[r * c + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = node.value.last_dim().max(1);
                let gv = val(*gain).data();
                let rows = g.len() / d;
                {
                    let dg = add_into(&mut grads[gain.0], d);
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                {
                    let db = add_into(&mut grads[bias.0], d);
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
                let dx = add_into(&mut grads[x.0], g.len());
                let mut gh = vec![0.0; d];
                for r in 0..rows {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        gh[j] = g[r * d + j] * gv[j];
                        s1 += gh[j];
                        s2 += gh[j] * xhat[r * d + j];
                    }
                    let k = inv_std[r] / d as f64;
                    for j in 0..d {
                        dx[r * d + j] += k * (d as f64 * gh[j] - s1 - xhat[r * d + j] * s2);
                    }
                }
            }
            Op::Concat(a, b) => {
                let (p, q) = (val(*a).last_dim(), val(*b).last_dim());
                let rows = if p + q == 0 { 0 } else { g.len() / (p + q) };
                {
                    let da = add_into(&mut grads[a.0], rows * p);
                    for r in 0..rows {
                        for j in 0..p {
                            da[r * p + j] += g[r * (p + q) + j];
                        }
                    }
                }
                let db = add_into(&mut grads[b.0], rows * q);
                for r in 0..rows {
                    for j in 0..q {
                        db[r * q + j] += g[r * (p + q) + p + j];
                    }
                }
            }
            Op::SliceLast { a, start } => {
                let d = val(*a).last_dim();
                let l = node.value.last_dim().max(1);
                let da = add_into(&mut grads[a.0], len(*a));
                for (r, chunk) in g.chunks(l).enumerate() {
                    for (j, x) in chunk.iter().enumerate() {
                        da[r * d + start + j] += x;
                    }
                }
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("shape");
                let back = tensor::permute(&gt, &inv).expect("valid inverse");
                let da = add_into(&mut grads[a.0], g.len());
                da.iter_mut().zip(back.data()).for_each(|(d, x)| *d += x);
            }
            Op::MeanAxis { a, axis } => {
                let sh = val(*a).shape();
                let outer: usize = sh[..*axis].iter().product();
                let n = sh[*axis];
                let inner: usize = sh[axis + 1..].iter().product();
                let da = add_into(&mut grads[a.0], len(*a));
                let w = 1.0 / n as f64;
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        for i in 0..inner {
                            da[base + i] += w * g[o * inner + i];
                        }
                    }
                }
            }
            Op::Mix { g: hg, t: ht, gamma } => {
                let (gv, tv, yv) = (val(*hg).data(), val(*ht).data(), val(*gamma).data());
                {
                    let d = add_into(&mut grads[hg.0], g.len());
                    for i in 0..g.len() {
                        d[i] += yv[i] * g[i];
                    }
                }
                {
                    let d = add_into(&mut grads[ht.0], g.len());
                    for i in 0..g.len() {
                        d[i] += (1.0 - yv[i]) * g[i];
                    }
                }
                let d = add_into(&mut grads[gamma.0], g.len());
                for i in 0..g.len() {
                    d[i] += (gv[i] - tv[i]) * g[i];
                }
            }
            Op::MixConst { g: hg, t: ht, gamma } => {
                {
                    let d = add_into(&mut grads[hg.0], g.len());
                    d.iter_mut().zip(g).for_each(|(d, x)| *d += gamma * x);
                }
                let d = add_into(&mut grads[ht.0], g.len());
                d.iter_mut().zip(g).for_each(|(d, x)| *d += (1.0 - gamma) * x);
            }
            Op::Sum(a) => {
                let da = add_into(&mut grads[a.0], len(*a));
                da.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mse { pred, target } => {
                let p = val(*pred).data();
                let n = p.len() as f64;
                let dp = add_into(&mut grads[pred.0], p.len());
                for i in 0..p.len() {
                    dp[i] += g[0] * 2.0 * (p[i] - target[i]) / n;
                }
            }
        }
    }
}

#[inline]
fn mix_scalar(gamma: f64, g: f64, t: f64) -> f64 {
    if gamma == 1.0 {
        g
    } else if gamma == 0.0 {
        t
    } else {
        let z = gamma * g + (1.0 - gamma) * t;
        z.clamp(g.min(t), g.max(t))
    }
}
