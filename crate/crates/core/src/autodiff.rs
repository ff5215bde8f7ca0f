//! Reverse-mode differentiation over a recorded computation graph.
//!
//! Every operation on a [`Var`] appends a node holding its forward value to
//! the [`Tape`]. [`Tape::backward`] walks the nodes in reverse and
//! accumulates vector-Jacobian products into every node that depends on a
//! leaf created with `requires_grad`. Constants (for example teacher outputs)
//! never receive gradients because no gradient-requiring node feeds them.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, matmul_t_into, matmul_tn_into, Tensor};

const GELU_K0: f64 = 0.797_884_560_802_865_4;
const GELU_K1: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    AddConst(usize),
    MulScalar(usize, usize),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Gelu(usize),
    Exp(usize),
    ClampMin(usize, T),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, inv_std: Vec<T> },
    L2Normalize { x: usize, norms: Vec<T> },
    Softmax { x: usize },
    LogSumExp { x: usize, mask: Option<Vec<bool>> },
    Pick { x: usize, idx: Vec<usize> },
    SumAll(usize),
    MeanRows(usize),
    RowSum(usize),
    DivRows(usize, usize),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    StraightThrough(usize),
    Reshape(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-threaded recording of one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when no path reaches it.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[usize], name: &'static str) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node { value, op, needs_grad });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Back-propagates from a single-element `root`.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::shape("backward root must hold one element"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape()));
        for id in (0..=root.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn slot<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Tensor<T>>], id: usize) -> Option<&'a mut [T]> {
    if !nodes[id].needs_grad {
        return None;
    }
    Some(
        grads[id]
            .get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()))
            .data_mut(),
    )
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let gd = g.data();
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &p in [a, b].iter() {
                if let Some(s) = slot(nodes, grads, *p) {
                    s.iter_mut().zip(gd).for_each(|(s, &g)| *s += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(gd).for_each(|(s, &g)| *s += g);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                s.iter_mut().zip(gd).for_each(|(s, &g)| *s -= g);
            }
        }
        Op::Mul(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                let bv = val(*b).data();
                s.iter_mut().zip(gd).zip(bv).for_each(|((s, &g), &b)| *s += g * b);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                let av = val(*a).data();
                s.iter_mut().zip(gd).zip(av).for_each(|((s, &g), &a)| *s += g * a);
            }
        }
        Op::AddRow(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(gd).for_each(|(s, &g)| *s += g);
            }
            let n = out.cols();
            if let Some(s) = slot(nodes, grads, *b) {
                for row in gd.chunks(n) {
                    s.iter_mut().zip(row).for_each(|(s, &g)| *s += g);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(gd).for_each(|(s, &g)| *s += *c * g);
            }
        }
        Op::AddConst(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(gd).for_each(|(s, &g)| *s += g);
            }
        }
        Op::MulScalar(a, k) => {
            let kv = val(*k).item();
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(gd).for_each(|(s, &g)| *s += kv * g);
            }
            if let Some(s) = slot(nodes, grads, *k) {
                let av = val(*a).data();
                s[0] += gd.iter().zip(av).map(|(&g, &a)| g * a).sum::<T>();
            }
        }
        Op::MatMul(a, b) => {
            let (m, k, n) = (val(*a).rows(), val(*a).cols(), val(*b).cols());
            if let Some(s) = slot(nodes, grads, *a) {
                matmul_t_into(gd, val(*b).data(), s, m, n, k);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                matmul_tn_into(val(*a).data(), gd, s, m, k, n);
            }
        }
        Op::MatMulT(a, b) => {
            let (m, k, n) = (val(*a).rows(), val(*a).cols(), val(*b).rows());
            if let Some(s) = slot(nodes, grads, *a) {
                matmul_into(gd, val(*b).data(), s, m, n, k);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                matmul_tn_into(gd, val(*a).data(), s, m, n, k);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (val(*a).rows(), val(*a).cols());
            if let Some(s) = slot(nodes, grads, *a) {
                for i in 0..m {
                    for j in 0..n {
                        s[i * n + j] += gd[j * m + i];
                    }
                }
            }
        }
        Op::Gelu(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                let (k0, k1) = (T::of(GELU_K0), T::of(GELU_K1));
                let half = T::of(0.5);
                let three = T::of(3.0);
                for ((s, &g), &x) in s.iter_mut().zip(gd).zip(val(*a).data()) {
                    let t = (k0 * (x + k1 * x * x * x)).tanh();
                    let d = half * (T::one() + t) + half * x * (T::one() - t * t) * k0 * (T::one() + three * k1 * x * x);
                    *s += g * d;
                }
            }
        }
        Op::ClampMin(a, floor) => {
            if let Some(s) = slot(nodes, grads, *a) {
                let x = val(*a).data();
                s.iter_mut().zip(gd).zip(x).for_each(|((s, &g), &x)| {
                    if x > *floor {
                        *s += g;
                    }
                });
            }
        }
        Op::Exp(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(gd).zip(out.data()).for_each(|((s, &g), &y)| *s += g * y);
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let n = out.cols();
            let gain_v = val(*gain).data();
            if let Some(s) = slot(nodes, grads, *bias) {
                for row in gd.chunks(n) {
                    s.iter_mut().zip(row).for_each(|(s, &g)| *s += g);
                }
            }
            if let Some(s) = slot(nodes, grads, *gain) {
                for (row, xh) in gd.chunks(n).zip(xhat.chunks(n)) {
                    s.iter_mut().zip(row).zip(xh).for_each(|((s, &g), &h)| *s += g * h);
                }
            }
            if let Some(s) = slot(nodes, grads, *x) {
                let nf = T::of(n as f64);
                for (r, (row, xh)) in gd.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..n {
                        let d = row[j] * gain_v[j];
                        mean_d += d;
                        mean_dh += d * xh[j];
                    }
                    mean_d /= nf;
                    mean_dh /= nf;
                    for j in 0..n {
                        let d = row[j] * gain_v[j];
                        s[r * n + j] += inv_std[r] * (d - mean_d - xh[j] * mean_dh);
                    }
                }
            }
        }
        Op::L2Normalize { x, norms } => {
            if let Some(s) = slot(nodes, grads, *x) {
                let n = out.cols();
                for (r, (row, y)) in gd.chunks(n).zip(out.data().chunks(n)).enumerate() {
                    let dot: T = row.iter().zip(y).map(|(&g, &y)| g * y).sum();
                    for j in 0..n {
                        s[r * n + j] += (row[j] - y[j] * dot) / norms[r];
                    }
                }
            }
        }
        Op::Softmax { x } => {
            if let Some(s) = slot(nodes, grads, *x) {
                let n = out.cols();
                for (r, (row, y)) in gd.chunks(n).zip(out.data().chunks(n)).enumerate() {
                    let dot: T = row.iter().zip(y).map(|(&g, &y)| g * y).sum();
                    for j in 0..n {
                        s[r * n + j] += y[j] * (row[j] - dot);
                    }
                }
            }
        }
        Op::LogSumExp { x, mask } => {
            if let Some(s) = slot(nodes, grads, *x) {
                let xv = val(*x);
                let n = xv.cols();
                for r in 0..xv.rows() {
                    for j in 0..n {
                        let k = r * n + j;
                        if mask.as_ref().is_none_or(|m| m[k]) {
                            s[k] += gd[r] * (xv.data()[k] - out.data()[r]).exp();
                        }
                    }
                }
            }
        }
        Op::Pick { x, idx } => {
            if let Some(s) = slot(nodes, grads, *x) {
                let n = val(*x).cols();
                for (r, &j) in idx.iter().enumerate() {
                    s[r * n + j] += gd[r];
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().for_each(|s| *s += gd[0]);
            }
        }
        Op::MeanRows(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                let (m, n) = (val(*a).rows(), val(*a).cols());
                let inv = T::one() / T::of(m as f64);
                for row in s.chunks_mut(n) {
                    row.iter_mut().zip(gd).for_each(|(s, &g)| *s += g * inv);
                }
            }
        }
        Op::RowSum(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                let n = val(*a).cols();
                for (row, &g) in s.chunks_mut(n).zip(gd) {
                    row.iter_mut().for_each(|s| *s += g);
                }
            }
        }
        Op::DivRows(a, v) => {
            let n = out.cols();
            let vv = val(*v).data();
            if let Some(s) = slot(nodes, grads, *a) {
                for (r, (srow, grow)) in s.chunks_mut(n).zip(gd.chunks(n)).enumerate() {
                    srow.iter_mut().zip(grow).for_each(|(s, &g)| *s += g / vv[r]);
                }
            }
            if let Some(s) = slot(nodes, grads, *v) {
                for (r, (grow, yrow)) in gd.chunks(n).zip(out.data().chunks(n)).enumerate() {
                    let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    s[r] -= dot / vv[r];
                }
            }
        }
        Op::SliceRows { x, start } => {
            if let Some(s) = slot(nodes, grads, *x) {
                let n = out.cols();
                let off = start * n;
                s[off..off + gd.len()].iter_mut().zip(gd).for_each(|(s, &g)| *s += g);
            }
        }
        Op::SliceCols { x, start } => {
            if let Some(s) = slot(nodes, grads, *x) {
                let n = val(*x).cols();
                let w = out.cols();
                for (r, grow) in gd.chunks(w).enumerate() {
                    s[r * n + start..r * n + start + w].iter_mut().zip(grow).for_each(|(s, &g)| *s += g);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = val(p).len();
                if let Some(s) = slot(nodes, grads, p) {
                    s.iter_mut().zip(&gd[off..off + len]).for_each(|(s, &g)| *s += g);
                }
                off += len;
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut col = 0;
            for &p in parts {
                let w = val(p).cols();
                if let Some(s) = slot(nodes, grads, p) {
                    for (r, srow) in s.chunks_mut(w).enumerate() {
                        srow.iter_mut()
                            .zip(&gd[r * total + col..r * total + col + w])
                            .for_each(|(s, &g)| *s += g);
                    }
                }
                col += w;
            }
        }
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(self) -> Tensor<T> {
        self.tape.value(self.id).clone()
    }

    pub fn with_value<R>(self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.value(self.id))
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn rows(self) -> usize {
        self.tape.value(self.id).rows()
    }

    pub fn cols(self) -> usize {
        self.tape.value(self.id).cols()
    }

    pub fn item(self) -> T {
        self.tape.value(self.id).item()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t, T> {
        self.tape.constant(self.value())
    }

    fn binary(self, other: Var<'t, T>, name: &'static str, op: fn(usize, usize) -> Op<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            same_shape(&a, &b, name)?;
            a.zip_map(&b, f)?
        };
        self.tape.push(value, op(self.id, other.id), &[self.id, other.id], name)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Self> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(self, bias: Var<'t, T>) -> Result<Self> {
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(bias.id);
            let n = a.cols();
            if b.len() != n {
                return Err(Error::shape(format!("add_row: bias {:?} for {:?}", b.shape(), a.shape())));
            }
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(n) {
                row.iter_mut().zip(b.data()).for_each(|(o, &b)| *o += b);
            }
            out
        };
        self.tape.push(value, Op::AddRow(self.id, bias.id), &[self.id, bias.id], "add_row")
    }

    pub fn scale(self, c: T) -> Result<Self> {
        let value = self.tape.value(self.id).map(|v| v * c);
        self.tape.push(value, Op::Scale(self.id, c), &[self.id], "scale")
    }

    pub fn add_const(self, c: T) -> Result<Self> {
        let value = self.tape.value(self.id).map(|v| v + c);
        self.tape.push(value, Op::AddConst(self.id), &[self.id], "add_const")
    }

    /// Multiplies every entry by a single-element variable.
    pub fn mul_scalar(self, k: Var<'t, T>) -> Result<Self> {
        let value = {
            let kv = self.tape.value(k.id);
            if kv.len() != 1 {
                return Err(Error::shape("mul_scalar expects a single-element factor"));
            }
            let kv = kv.item();
            self.tape.value(self.id).map(|v| v * kv)
        };
        self.tape.push(value, Op::MulScalar(self.id, k.id), &[self.id, k.id], "mul_scalar")
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Self> {
        let value = self.tape.value(self.id).matmul(&self.tape.value(other.id))?;
        self.tape.push(value, Op::MatMul(self.id, other.id), &[self.id, other.id], "matmul")
    }

    /// `self · otherᵀ`; both operands share their column count.
    pub fn matmul_t(self, other: Var<'t, T>) -> Result<Self> {
        let value = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let (m, k, n) = (a.rows(), a.cols(), b.rows());
            if b.cols() != k {
                return Err(Error::shape(format!("matmul_t {m}x{k} by ({n}x{})ᵀ", b.cols())));
            }
            let mut out = vec![T::zero(); m * n];
            matmul_t_into(a.data(), b.data(), &mut out, m, k, n);
            Tensor::matrix(m, n, out)?
        };
        self.tape.push(value, Op::MatMulT(self.id, other.id), &[self.id, other.id], "matmul_t")
    }

    pub fn transpose(self) -> Result<Self> {
        let value = self.tape.value(self.id).transpose();
        self.tape.push(value, Op::Transpose(self.id), &[self.id], "transpose")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Result<Self> {
        let (k0, k1, half) = (T::of(GELU_K0), T::of(GELU_K1), T::of(0.5));
        let value = self
            .tape
            .value(self.id)
            .map(|x| half * x * (T::one() + (k0 * (x + k1 * x * x * x)).tanh()));
        self.tape.push(value, Op::Gelu(self.id), &[self.id], "gelu")
    }

    /// `max(x, floor)` elementwise; no gradient where the floor is active.
    pub fn clamp_min(self, floor: T) -> Result<Self> {
        let value = self.tape.value(self.id).map(|v| v.max(floor));
        self.tape.push(value, Op::ClampMin(self.id, floor), &[self.id], "clamp_min")
    }

    pub fn exp(self) -> Result<Self> {
        let value = self.tape.value(self.id).map(T::exp);
        self.tape.push(value, Op::Exp(self.id), &[self.id], "exp")
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: T) -> Result<Self> {
        let (value, xhat, inv_std) = {
            let x = self.tape.value(self.id);
            let n = x.cols();
            let g = self.tape.value(gain.id);
            let b = self.tape.value(bias.id);
            if g.len() != n || b.len() != n {
                return Err(Error::shape("layer_norm gain/bias width"));
            }
            let nf = T::of(n as f64);
            let mut xhat = Vec::with_capacity(x.len());
            let mut inv_std = Vec::with_capacity(x.rows());
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(n) {
                let mean = row.iter().copied().sum::<T>() / nf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let is = T::one() / (var + eps).sqrt();
                inv_std.push(is);
                for j in 0..n {
                    let h = (row[j] - mean) * is;
                    xhat.push(h);
                    out.push(h * g.data()[j] + b.data()[j]);
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, inv_std)
        };
        self.tape.push(
            value,
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, inv_std },
            &[self.id, gain.id, bias.id],
            "layer_norm",
        )
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(self, eps: T) -> Result<Self> {
        let (value, norms) = {
            let x = self.tape.value(self.id);
            let n = x.cols();
            let mut norms = Vec::with_capacity(x.rows());
            let mut out = x.clone();
            for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
                let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm <= eps {
                    return Err(Error::DegenerateVector { row: r, norm: norm.f64() });
                }
                row.iter_mut().for_each(|v| *v = *v / norm);
                norms.push(norm);
            }
            (out, norms)
        };
        self.tape.push(value, Op::L2Normalize { x: self.id, norms }, &[self.id], "l2_normalize")
    }

    /// Row-wise softmax with max subtraction. `mask[k] == false` forces a zero
    /// probability for entry `k`; every row must keep at least one entry.
    pub fn softmax_rows(self, mask: Option<&[bool]>) -> Result<Self> {
        let value = {
            let x = self.tape.value(self.id);
            let n = x.cols();
            if let Some(m) = mask {
                if m.len() != x.len() {
                    return Err(Error::shape("softmax mask size"));
                }
            }
            let keep = |k: usize| mask.is_none_or(|m| m[k]);
            let mut out = vec![T::zero(); x.len()];
            for r in 0..x.rows() {
                let row = x.row(r);
                let mut max = T::neg_infinity();
                for j in 0..n {
                    if keep(r * n + j) {
                        max = max.max(row[j]);
                    }
                }
                if max == T::neg_infinity() {
                    return Err(Error::shape("softmax row fully masked"));
                }
                let mut sum = T::zero();
                for j in 0..n {
                    if keep(r * n + j) {
                        let e = (row[j] - max).exp();
                        out[r * n + j] = e;
                        sum += e;
                    }
                }
                out[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = *v / sum);
            }
            Tensor::new(x.shape().to_vec(), out)?
        };
        self.tape.push(value, Op::Softmax { x: self.id }, &[self.id], "softmax")
    }

    /// Row-wise `log Σ_j exp(x_ij)` over unmasked entries, as an `m × 1` column.
    pub fn logsumexp_rows(self, mask: Option<Vec<bool>>) -> Result<Self> {
        let value = {
            let x = self.tape.value(self.id);
            let n = x.cols();
            if let Some(m) = &mask {
                if m.len() != x.len() {
                    return Err(Error::shape("logsumexp mask size"));
                }
            }
            let keep = |k: usize| mask.as_ref().is_none_or(|m| m[k]);
            let mut out = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                let row = x.row(r);
                let mut max = T::neg_infinity();
                for j in 0..n {
                    if keep(r * n + j) {
                        max = max.max(row[j]);
                    }
                }
                if max == T::neg_infinity() {
                    return Err(Error::shape("logsumexp row fully masked"));
                }
                let mut sum = T::zero();
                for j in 0..n {
                    if keep(r * n + j) {
                        sum += (row[j] - max).exp();
                    }
                }
                out.push(max + sum.ln());
            }
            Tensor::matrix(x.rows(), 1, out)?
        };
        self.tape.push(value, Op::LogSumExp { x: self.id, mask }, &[self.id], "logsumexp")
    }

    /// Gathers `x[i, idx[i]]` into an `m × 1` column.
    pub fn pick(self, idx: &[usize]) -> Result<Self> {
        let value = {
            let x = self.tape.value(self.id);
            if idx.len() != x.rows() || idx.iter().any(|&j| j >= x.cols()) {
                return Err(Error::shape("pick indices"));
            }
            let data = idx.iter().enumerate().map(|(r, &j)| x.at(r, j)).collect();
            Tensor::matrix(x.rows(), 1, data)?
        };
        self.tape.push(value, Op::Pick { x: self.id, idx: idx.to_vec() }, &[self.id], "pick")
    }

    pub fn sum(self) -> Result<Self> {
        let value = Tensor::scalar(self.tape.value(self.id).data().iter().copied().sum());
        self.tape.push(value, Op::SumAll(self.id), &[self.id], "sum")
    }

    /// Mean over rows: `m × n → 1 × n`.
    pub fn mean_rows(self) -> Result<Self> {
        let value = {
            let x = self.tape.value(self.id);
            let (m, n) = (x.rows(), x.cols());
            let mut out = vec![T::zero(); n];
            for row in x.data().chunks(n) {
                out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
            }
            let inv = T::one() / T::of(m as f64);
            out.iter_mut().for_each(|o| *o *= inv);
            Tensor::matrix(1, n, out)?
        };
        self.tape.push(value, Op::MeanRows(self.id), &[self.id], "mean_rows")
    }

    /// Per-row sums: `m × n → m × 1`.
    pub fn row_sum(self) -> Result<Self> {
        let value = {
            let x = self.tape.value(self.id);
            let data = x.data().chunks(x.cols()).map(|r| r.iter().copied().sum()).collect();
            Tensor::matrix(x.rows(), 1, data)?
        };
        self.tape.push(value, Op::RowSum(self.id), &[self.id], "row_sum")
    }

    /// Divides row `i` by `v[i]`.
    pub fn div_rows(self, v: Var<'t, T>) -> Result<Self> {
        let value = {
            let x = self.tape.value(self.id);
            let d = self.tape.value(v.id);
            if d.len() != x.rows() {
                return Err(Error::shape("div_rows divisor length"));
            }
            let n = x.cols();
            let mut out = x.clone();
            for (row, &dv) in out.data_mut().chunks_mut(n).zip(d.data()) {
                row.iter_mut().for_each(|o| *o = *o / dv);
            }
            out
        };
        self.tape.push(value, Op::DivRows(self.id, v.id), &[self.id, v.id], "div_rows")
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Self> {
        let value = {
            let x = self.tape.value(self.id);
            if len == 0 || start + len > x.rows() {
                return Err(Error::shape(format!("slice_rows {start}+{len} of {}", x.rows())));
            }
            let n = x.cols();
            Tensor::matrix(len, n, x.data()[start * n..(start + len) * n].to_vec())?
        };
        self.tape.push(value, Op::SliceRows { x: self.id, start }, &[self.id], "slice_rows")
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Self> {
        let value = {
            let x = self.tape.value(self.id);
            let n = x.cols();
            if len == 0 || start + len > n {
                return Err(Error::shape(format!("slice_cols {start}+{len} of {n}")));
            }
            let data = x.data().chunks(n).flat_map(|r| r[start..start + len].iter().copied()).collect();
            Tensor::matrix(x.rows(), len, data)?
        };
        self.tape.push(value, Op::SliceCols { x: self.id, start }, &[self.id], "slice_cols")
    }

    /// One-hot row argmax in the forward pass (ties to the lowest column), identity gradient.
    pub fn straight_through_one_hot(self) -> Result<Self> {
        let value = {
            let x = self.tape.value(self.id);
            let n = x.cols();
            let mut out = vec![T::zero(); x.len()];
            for (r, row) in x.data().chunks(n).enumerate() {
                out[r * n + argmax(row)] = T::one();
            }
            Tensor::new(x.shape().to_vec(), out)?
        };
        self.tape.push(value, Op::StraightThrough(self.id), &[self.id], "straight_through")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let value = self.tape.value(self.id).clone().reshape(shape)?;
        self.tape.push(value, Op::Reshape(self.id), &[self.id], "reshape")
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Stacks matrices with equal column counts.
pub fn concat_rows<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat_rows of nothing"))?;
    let tape = first.tape;
    let value = {
        let n = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = tape.value(p.id);
            if v.cols() != n {
                return Err(Error::shape("concat_rows column mismatch"));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        Tensor::matrix(rows, n, data)?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.push(value, Op::ConcatRows(ids.clone()), &ids, "concat_rows")
}

/// Places matrices with equal row counts side by side.
pub fn concat_cols<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat_cols of nothing"))?;
    let tape = first.tape;
    let value = {
        let m = first.rows();
        let vals: Vec<_> = parts.iter().map(|p| tape.value(p.id)).collect();
        if vals.iter().any(|v| v.rows() != m) {
            return Err(Error::shape("concat_cols row mismatch"));
        }
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        Tensor::matrix(m, total, data)?
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    tape.push(value, Op::ConcatCols(ids.clone()), &ids, "concat_cols")
}
