//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass. Nodes
//! are appended in execution order, so the tape is topologically sorted and
//! [`Graph::backward`] is a single reverse sweep. Parameters enter the tape by
//! copy from a [`ParamStore`]; their gradients are accumulated back into the
//! store by [`Graph::backward_params`].
//!
//! Nodes whose ancestors contain no trainable leaf carry `needs_grad = false`
//! and are skipped entirely during the sweep, which is how frozen encoder
//! weights avoid any gradient computation.

use std::collections::HashMap;

use super::rng::{self, Rng};
use super::tensor::{numel, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise function paired with its derivative, both in terms of the input.
#[derive(Clone, Copy)]
pub struct ElementwiseFn {
    pub name: &'static str,
    pub f: fn(f64) -> f64,
    pub df: fn(f64) -> f64,
}

impl std::fmt::Debug for ElementwiseFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name)
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Map(Var, ElementwiseFn),
    Softmax(Var),
    Mean { x: Var, outer: usize, dim: usize, inner: usize },
    Sum(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    Narrow { x: Var, outer: usize, dim: usize, inner: usize, start: usize, len: usize },
    Gather { table: Var, idx: Vec<usize>, row: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SelectRows { cond: Vec<bool>, a: Var, b: Var, row: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    // persistent gradient of Input/Param leaves, accumulated across sweeps
    grad: Option<Vec<f64>>,
}

/// Computation tape for one forward/backward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    train: bool,
    rng: Option<Rng>,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// `c = beta * c + op(a) * op(b)` for row/column strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted bounds above cover every element the kernel reads or writes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Tanh-approximated GELU, as used in BERT-style feed-forward blocks.
/// Largest f64 below 1.
pub const TANH_BOUND: f64 = 1.0 - f64::EPSILON / 2.0;

pub const GELU: ElementwiseFn = ElementwiseFn {
    name: "gelu",
    f: gelu,
    df: gelu_grad,
};

pub const RELU: ElementwiseFn = ElementwiseFn {
    name: "relu",
    f: |x| x.max(0.0),
    df: |x| if x > 0.0 { 1.0 } else { 0.0 },
};

impl Graph {
    /// Inference tape: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            train: false,
            rng: None,
            params: HashMap::new(),
        }
    }

    /// Training tape; dropout masks are drawn from `rng`, one uniform per
    /// element in row-major order, in the order dropout ops are applied.
    pub fn training(rng: Rng) -> Self {
        Graph {
            nodes: Vec::new(),
            train: true,
            rng: Some(rng),
            params: HashMap::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    /// Hands back the dropout generator so its stream continues across tapes.
    pub fn into_rng(self) -> Option<Rng> {
        self.rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(name.to_string()));
        }
        Ok(self.push(shape, value, op, needs_grad))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copy of a node's value as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape values are finite")
    }

    /// Accumulated gradient of an input or parameter leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // ---- leaves -------------------------------------------------------------

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_values(), Op::Constant, false)
    }

    /// A differentiable leaf whose gradient is kept on the tape.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Input, true)
    }

    /// Places a parameter on the tape (once per tape; repeated calls reuse the node).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Param(id),
            t.requires_grad(),
        );
        self.params.insert(id, v);
        v
    }

    // ---- linear algebra -------------------------------------------------------

    /// Matrix product of 2-D operands, or batched over a shared leading axis
    /// for 3-D operands. `ta`/`tb` read the stored operand transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rank = sa.len();
        if rank != sb.len() || !(rank == 2 || rank == 3) || (rank == 3 && sa[0] != sb[0]) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let groups = if rank == 3 { sa[0] } else { 1 };
        let (ra, ca) = (sa[rank - 2], sa[rank - 1]);
        let (rb, cb) = (sb[rank - 2], sb[rank - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; groups * m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for g in 0..groups {
                gemm(
                    m,
                    k,
                    n,
                    &av[g * m * k..],
                    a_strides(ta, m, k),
                    &bv[g * k * n..],
                    a_strides(tb, k, n),
                    &mut out[g * m * n..(g + 1) * m * n],
                    (n, 1),
                    0.0,
                );
            }
        }
        let shape = if rank == 3 { vec![groups, m, n] } else { vec![m, n] };
        let needs = self.needs(&[a, b]);
        self.push_checked(
            "matmul",
            shape,
            out,
            Op::MatMul { a, b, ta, tb, groups, m, k, n },
            needs,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    // ---- elementwise -----------------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push_checked(name, shape, out, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a vector of length `last` to every row of `x` (`x` has trailing dim `last`).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != sb.first() {
            return Err(Error::shape("add_row", sx, sb));
        }
        let n = sb[0];
        let bv = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        let needs = self.needs(&[x, bias]);
        let shape = self.shape(x).to_vec();
        self.push_checked("add_row", shape, out, Op::AddRow(x, bias), needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let needs = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        self.push_checked("scale", shape, out, Op::Scale(x, c), needs)
    }

    /// `tanh`, kept strictly inside (-1, 1): where the f64 result rounds to
    /// ±1 it is replaced by the nearest representable value inside.
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.tanh().clamp(-TANH_BOUND, TANH_BOUND)).collect();
        let needs = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        self.push_checked("tanh", shape, out, Op::Tanh(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let needs = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        self.push_checked("sigmoid", shape, out, Op::Sigmoid(x), needs)
    }

    /// Applies a caller-supplied elementwise function with its derivative.
    pub fn map(&mut self, x: Var, func: ElementwiseFn) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| (func.f)(v)).collect();
        let needs = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        self.push_checked(func.name, shape, out, Op::Map(x, func), needs)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, GELU)
    }

    // ---- reductions and normalization -------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("softmax", &shape, &[]))?;
        let mut out = self.value(x).to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        let needs = self.needs(&[x]);
        self.push_checked("softmax", shape, out, Op::Softmax(x), needs)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("mean", &shape, &[axis]));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xv[base + i];
                }
            }
        }
        let inv = 1.0 / dim as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        let needs = self.needs(&[x]);
        self.push_checked("mean", new_shape, out, Op::Mean { x, outer, dim, inner }, needs)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).iter().sum();
        let needs = self.needs(&[x]);
        self.push_checked("sum", Vec::new(), vec![s], Op::Sum(x), needs)
    }

    /// Mean of all entries, as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = numel(&shape) / d.max(1);
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        self.push_checked(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            needs,
        )
    }

    // ---- stochastic ---------------------------------------------------------------

    /// Inverted dropout. Identity when the tape is not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("dropout probability {p} not in [0, 1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let rng = self.rng.as_mut().expect("training tape carries a generator");
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng::unit(rng) < p { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let needs = self.needs(&[x]);
        let shape = self.shape(x).to_vec();
        self.push_checked("dropout", shape, out, Op::Dropout { x, mask }, needs)
    }

    // ---- structural -----------------------------------------------------------------

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat", &[], &[]))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p)[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let needs = self.needs(parts);
        let parts = parts.iter().map(|&p| (p, self.shape(p)[axis])).collect();
        self.push_checked("concat", shape, out, Op::Concat { parts, outer, inner }, needs)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("narrow", &shape, &[axis, start, len]));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let needs = self.needs(&[x]);
        self.push_checked(
            "narrow",
            new_shape,
            out,
            Op::Narrow { x, outer, dim, inner, start, len },
            needs,
        )
    }

    /// Selects rows (slices along the first axis) of `table` by index.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        let rows = *shape.first().ok_or_else(|| Error::shape("gather", &shape, &[]))?;
        let row: usize = shape[1..].iter().product();
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= rows {
                return Err(Error::shape("gather", &shape, &[i]));
            }
            out.extend_from_slice(&tv[i * row..(i + 1) * row]);
        }
        let mut new_shape = shape;
        new_shape[0] = idx.len();
        let needs = self.needs(&[table]);
        self.push_checked(
            "gather",
            new_shape,
            out,
            Op::Gather { table, idx: idx.to_vec(), row },
            needs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let needs = self.needs(&[x]);
        self.push_checked("reshape", shape.to_vec(), out, Op::Reshape(x), needs)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_values(self.value(x), &shape, perm);
        let needs = self.needs(&[x]);
        self.push_checked("permute", new_shape, out, Op::Permute { x, perm: perm.to_vec() }, needs)
    }

    /// Row-wise choice: row `r` of the output is row `r` of `a` when `cond[r]`,
    /// otherwise row `r` of `b`.
    pub fn select_rows(&mut self, cond: &[bool], a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape != self.shape(b) || shape.first() != Some(&cond.len()) {
            return Err(Error::shape("select_rows", &shape, self.shape(b)));
        }
        let row: usize = shape[1..].iter().product();
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(av.len());
        for (r, &c) in cond.iter().enumerate() {
            let src = if c { av } else { bv };
            out.extend_from_slice(&src[r * row..(r + 1) * row]);
        }
        let needs = self.needs(&[a, b]);
        self.push_checked(
            "select_rows",
            shape,
            out,
            Op::SelectRows { cond: cond.to_vec(), a, b, row },
            needs,
        )
    }

    // ---- backward ---------------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients of [`Graph::input`] leaves
    /// and parameters accumulate on the tape (see [`Graph::grad`]).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let grads = self.propagate(loss)?;
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Input | Op::Param(_), Some(g)) = (&node.op, g) {
                accumulate(&mut node.grad, &g);
            }
        }
        Ok(())
    }

    /// Reverse sweep that accumulates parameter gradients into `store`.
    pub fn backward_params(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.propagate(loss)?;
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            match (&node.op, g) {
                (Op::Param(id), Some(g)) => store.get_mut(*id).accumulate_grad(&g),
                (Op::Input, Some(g)) => accumulate(&mut node.grad, &g),
                _ => {}
            }
        }
        Ok(())
    }

    fn propagate(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::NotScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !ln.needs_grad {
            return Ok(grads);
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        // lazily allocated gradient buffer for a parent, or None when it needs none
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs_grad {
                    let len = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb, groups, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let sa = a_strides(*ta, m, k);
                let sb = a_strides(*tb, k, n);
                if let Some(ga) = slot!(*a) {
                    let bv = &self.nodes[b.0].value;
                    for grp in 0..*groups {
                        // dA = dC * B^T, written through A's stored layout
                        gemm(
                            m,
                            n,
                            k,
                            &g[grp * m * n..],
                            (n, 1),
                            &bv[grp * k * n..],
                            (sb.1, sb.0),
                            &mut ga[grp * m * k..(grp + 1) * m * k],
                            sa,
                            1.0,
                        );
                    }
                }
                if let Some(gb) = slot!(*b) {
                    let av = &self.nodes[a.0].value;
                    for grp in 0..*groups {
                        // dB = A^T * dC
                        gemm(
                            k,
                            m,
                            n,
                            &av[grp * m * k..],
                            (sa.1, sa.0),
                            &g[grp * m * n..],
                            (n, 1),
                            &mut gb[grp * k * n..(grp + 1) * k * n],
                            sb,
                            1.0,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot!(*a) {
                    let bv = &self.nodes[b.0].value;
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    let av = &self.nodes[a.0].value;
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = slot!(*x) {
                    add_into(gx, g);
                }
                if let Some(gb) = slot!(*bias) {
                    let n = gb.len();
                    for (j, s) in g.iter().enumerate() {
                        gb[j % n] += s;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s * c);
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = slot!(*x) {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *d += s * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = slot!(*x) {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *d += s * y * (1.0 - y);
                    }
                }
            }
            Op::Map(x, func) => {
                if let Some(gx) = slot!(*x) {
                    let xv = &self.nodes[x.0].value;
                    for ((d, s), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += s * (func.df)(v);
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = slot!(*x) {
                    let d = *node.shape.last().unwrap();
                    for ((gr, yr), dr) in g.chunks(d).zip(node.value.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Mean { x, outer, dim, inner } => {
                if let Some(gx) = slot!(*x) {
                    let inv = 1.0 / *dim as f64;
                    for o in 0..*outer {
                        for d in 0..*dim {
                            let base = (o * dim + d) * inner;
                            for i in 0..*inner {
                                gx[base + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = slot!(*x) {
                    for ((d, s), m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += s * m;
                    }
                }
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, d) in parts {
                    if let Some(gp) = slot!(p) {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                            add_into(&mut gp[o * d * inner..(o + 1) * d * inner], src);
                        }
                    }
                    offset += d;
                }
            }
            Op::Narrow { x, outer, dim, inner, start, len } => {
                if let Some(gx) = slot!(*x) {
                    for o in 0..*outer {
                        let base = (o * dim + start) * inner;
                        add_into(
                            &mut gx[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            Op::Gather { table, idx, row } => {
                if let Some(gt) = slot!(*table) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gt[i * row..(i + 1) * row], &g[r * row..(r + 1) * row]);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot!(*x) {
                    add_into(gx, g);
                }
            }
            Op::Permute { x, perm } => {
                if let Some(gx) = slot!(*x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let back = permute_values(g, &node.shape, &inv);
                    add_into(gx, &back);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *node.shape.last().unwrap();
                let gv = &self.nodes[gamma.0].value;
                if let Some(gg) = slot!(*gamma) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = slot!(*beta) {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let inv_d = 1.0 / d as f64;
                    for (r, ((gr, hr), dr)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dr[j] += rstd[r] * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
                        }
                    }
                }
            }
            Op::SelectRows { cond, a, b, row } => {
                if let Some(ga) = slot!(*a) {
                    for (r, _) in cond.iter().enumerate().filter(|(_, &c)| c) {
                        add_into(&mut ga[r * row..(r + 1) * row], &g[r * row..(r + 1) * row]);
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for (r, _) in cond.iter().enumerate().filter(|(_, &c)| !c) {
                        add_into(&mut gb[r * row..(r + 1) * row], &g[r * row..(r + 1) * row]);
                    }
                }
            }
        }
    }
}

/// Row/column strides of a logical `rows x cols` operand stored either as is
/// or transposed.
fn a_strides(transposed: bool, rows: usize, cols: usize) -> (usize, usize) {
    if transposed {
        (1, rows)
    } else {
        (cols, 1)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(s) => add_into(s, g),
        None => *slot = Some(g.to_vec()),
    }
}

fn permute_values(values: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = values.len();
    let mut out = Vec::with_capacity(total);
    let mut counter = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..total {
        out.push(values[src]);
        // odometer increment over the output shape
        for ax in (0..out_shape.len()).rev() {
            counter[ax] += 1;
            src += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    out
}
