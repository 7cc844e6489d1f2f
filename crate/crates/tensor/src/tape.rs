//! Record-then-replay reverse-mode differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Nodes only
//! reference earlier nodes, so the node order is a topological order and
//! the backward pass is a single reverse sweep.
//!
//! Shape misuse in an op is a programming error and panics. Non-finite
//! values poison the tape: the first offending op is remembered and every
//! later [`Tape::gradient_of`] call reports it.

use std::cell::{Ref, RefCell};
use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{Result, TensorError};
use crate::functional::{gemm, log_softmax_row, softmax_row};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    Exp(usize),
    Relu(usize),
    Gelu(usize),
    Clamp(usize, f64, f64),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    LayerNorm {
        a: usize,
        rstd: Vec<f64>,
    },
    Softmax(usize),
    LogSoftmax(usize),
    L2Normalize {
        a: usize,
        inv_norms: Vec<f64>,
    },
    Gather {
        a: usize,
        idx: Vec<isize>,
    },
    Concat(Vec<usize>),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    GroupMean {
        a: usize,
        group: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    poisoned: Option<TensorError>,
}

/// Append-only record of a computation.
///
/// A tape is confined to one thread; build a fresh one per forward pass.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf whose gradient can be requested.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First non-finite failure recorded on this tape, if any.
    pub fn poisoned(&self) -> Option<TensorError> {
        self.inner.borrow().poisoned.clone()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        if inner.poisoned.is_none() && !value.is_finite() {
            inner.poisoned = Some(TensorError::NonFinite { op: name });
        }
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.inner.borrow(), |i| &i.nodes[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Gradients of the scalar `loss` with respect to each of `params`.
    ///
    /// Params that `loss` does not depend on receive zeros. The replay is a
    /// pure function of the recorded tape, so calling it twice yields
    /// bit-identical results.
    pub fn gradient_of(&self, loss: Var<'_>, params: &[Var<'_>]) -> Result<Vec<Tensor>> {
        let inner = self.inner.borrow();
        if let Some(err) = &inner.poisoned {
            return Err(err.clone());
        }
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::Detached { id: loss.id });
        }
        let loss_node = &inner.nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        for p in params {
            if !std::ptr::eq(p.tape, self) || !inner.nodes[p.id].requires_grad {
                return Err(TensorError::Detached { id: p.id });
            }
        }

        let grads = backward(&inner.nodes, loss.id);
        params
            .iter()
            .map(|p| {
                let node = &inner.nodes[p.id];
                let g = match &grads[p.id] {
                    Some(g) => Tensor::from_parts(node.value.shape().to_vec(), g.clone()),
                    None => Tensor::zeros(node.value.shape().to_vec()),
                };
                if g.is_finite() {
                    Ok(g)
                } else {
                    Err(TensorError::NonFinite { op: "backward" })
                }
            })
            .collect()
    }
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

fn backward(nodes: &[Node], loss: usize) -> Vec<Option<Vec<f64>>> {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss + 1];
    grads[loss] = Some(vec![1.0]);
    for id in (0..=loss).rev() {
        if !nodes[id].requires_grad || matches!(nodes[id].op, Op::Leaf) {
            continue;
        }
        let Some(g) = grads[id].take() else { continue };
        let out = &nodes[id].value;
        let val = |i: usize| nodes[i].value.data();
        let len = |i: usize| nodes[i].value.numel();
        let rg = |i: usize| nodes[i].requires_grad;
        match &nodes[id].op {
            Op::Leaf => unreachable!(),
            &Op::Add(a, b) => {
                for (x, i) in [(1.0, a), (1.0, b)] {
                    if rg(i) {
                        let ga = acc(&mut grads[i], len(i));
                        ga.iter_mut().zip(&g).for_each(|(s, d)| *s += x * d);
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (x, i) in [(1.0, a), (-1.0, b)] {
                    if rg(i) {
                        let ga = acc(&mut grads[i], len(i));
                        ga.iter_mut().zip(&g).for_each(|(s, d)| *s += x * d);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if rg(a) {
                    let vb = val(b);
                    let ga = acc(&mut grads[a], len(a));
                    for ((s, d), y) in ga.iter_mut().zip(&g).zip(vb) {
                        *s += d * y;
                    }
                }
                if rg(b) {
                    let va = val(a);
                    let gb = acc(&mut grads[b], len(b));
                    for ((s, d), x) in gb.iter_mut().zip(&g).zip(va) {
                        *s += d * x;
                    }
                }
            }
            &Op::AddRow(a, b) => {
                let n = len(b);
                if rg(a) {
                    let ga = acc(&mut grads[a], len(a));
                    ga.iter_mut().zip(&g).for_each(|(s, d)| *s += d);
                }
                if rg(b) {
                    let gb = acc(&mut grads[b], n);
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(s, d)| *s += d);
                    }
                }
            }
            &Op::MulRow(a, b) => {
                let n = len(b);
                if rg(a) {
                    let vb = val(b);
                    let ga = acc(&mut grads[a], len(a));
                    for (srow, drow) in ga.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        for ((s, d), y) in srow.iter_mut().zip(drow).zip(vb) {
                            *s += d * y;
                        }
                    }
                }
                if rg(b) {
                    let va = val(a);
                    let gb = acc(&mut grads[b], n);
                    for (drow, xrow) in g.chunks_exact(n).zip(va.chunks_exact(n)) {
                        for ((s, d), x) in gb.iter_mut().zip(drow).zip(xrow) {
                            *s += d * x;
                        }
                    }
                }
            }
            &Op::Scale(a, c) => {
                if rg(a) {
                    let ga = acc(&mut grads[a], len(a));
                    ga.iter_mut().zip(&g).for_each(|(s, d)| *s += c * d);
                }
            }
            &Op::ScaleBy(a, sc) => {
                let s_val = val(sc)[0];
                if rg(a) {
                    let ga = acc(&mut grads[a], len(a));
                    ga.iter_mut().zip(&g).for_each(|(s, d)| *s += s_val * d);
                }
                if rg(sc) {
                    let dot: f64 = g.iter().zip(val(a)).map(|(d, x)| d * x).sum();
                    acc(&mut grads[sc], 1)[0] += dot;
                }
            }
            &Op::Exp(a) => {
                let ga = acc(&mut grads[a], len(a));
                for ((s, d), y) in ga.iter_mut().zip(&g).zip(out.data()) {
                    *s += d * y;
                }
            }
            &Op::Relu(a) => {
                let va = val(a);
                let ga = acc(&mut grads[a], len(a));
                for ((s, d), x) in ga.iter_mut().zip(&g).zip(va) {
                    if *x > 0.0 {
                        *s += d;
                    }
                }
            }
            &Op::Gelu(a) => {
                let va = val(a);
                let ga = acc(&mut grads[a], len(a));
                for ((s, d), &x) in ga.iter_mut().zip(&g).zip(va) {
                    *s += d * gelu_grad(x);
                }
            }
            &Op::Clamp(a, lo, hi) => {
                let va = val(a);
                let ga = acc(&mut grads[a], len(a));
                for ((s, d), &x) in ga.iter_mut().zip(&g).zip(va) {
                    if (lo..=hi).contains(&x) {
                        *s += d;
                    }
                }
            }
            &Op::MatMul { a, b, m, k, n } => {
                if rg(a) {
                    // dA = dC · Bᵀ
                    let vb = val(b);
                    let ga = acc(&mut grads[a], m * k);
                    gemm(m, n, k, &g, (n, 1), vb, (1, n), ga, true);
                }
                if rg(b) {
                    // dB = Aᵀ · dC
                    let va = val(a);
                    let gb = acc(&mut grads[b], k * n);
                    gemm(k, m, n, va, (1, k), &g, (n, 1), gb, true);
                }
            }
            &Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (sa, sb, sc) = (m * k, k * n, m * n);
                if rg(a) {
                    let vb = val(b);
                    let ga = acc(&mut grads[a], batch * sa);
                    for t in 0..batch {
                        let gt = &g[t * sc..(t + 1) * sc];
                        let bt = &vb[t * sb..(t + 1) * sb];
                        let at = &mut ga[t * sa..(t + 1) * sa];
                        // dA = dC · Bᵀ, where B is k×n (or stored n×k when transposed)
                        let bstride = if trans_b { (k, 1) } else { (1, n) };
                        gemm(m, n, k, gt, (n, 1), bt, bstride, at, true);
                    }
                }
                if rg(b) {
                    let va = val(a);
                    let gb = acc(&mut grads[b], batch * sb);
                    for t in 0..batch {
                        let gt = &g[t * sc..(t + 1) * sc];
                        let at = &va[t * sa..(t + 1) * sa];
                        let bt = &mut gb[t * sb..(t + 1) * sb];
                        if trans_b {
                            // dB (n×k) = dCᵀ · A
                            gemm(n, m, k, gt, (1, n), at, (k, 1), bt, true);
                        } else {
                            // dB (k×n) = Aᵀ · dC
                            gemm(k, m, n, at, (1, k), gt, (n, 1), bt, true);
                        }
                    }
                }
            }
            Op::LayerNorm { a, rstd } => {
                let w = out.last_dim();
                let ga = acc(&mut grads[*a], g.len());
                for (((srow, drow), yrow), &r) in ga
                    .chunks_exact_mut(w)
                    .zip(g.chunks_exact(w))
                    .zip(out.data().chunks_exact(w))
                    .zip(rstd)
                {
                    let mean_g = drow.iter().sum::<f64>() / w as f64;
                    let mean_gy = drow.iter().zip(yrow).map(|(d, y)| d * y).sum::<f64>() / w as f64;
                    for ((s, d), y) in srow.iter_mut().zip(drow).zip(yrow) {
                        *s += r * (d - mean_g - y * mean_gy);
                    }
                }
            }
            &Op::Softmax(a) => {
                let w = out.last_dim();
                let ga = acc(&mut grads[a], g.len());
                for ((srow, drow), yrow) in ga
                    .chunks_exact_mut(w)
                    .zip(g.chunks_exact(w))
                    .zip(out.data().chunks_exact(w))
                {
                    let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                    for ((s, d), y) in srow.iter_mut().zip(drow).zip(yrow) {
                        *s += y * (d - dot);
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                let w = out.last_dim();
                let ga = acc(&mut grads[a], g.len());
                for ((srow, drow), yrow) in ga
                    .chunks_exact_mut(w)
                    .zip(g.chunks_exact(w))
                    .zip(out.data().chunks_exact(w))
                {
                    let total: f64 = drow.iter().sum();
                    for ((s, d), y) in srow.iter_mut().zip(drow).zip(yrow) {
                        *s += d - y.exp() * total;
                    }
                }
            }
            Op::L2Normalize { a, inv_norms } => {
                let w = out.last_dim();
                let ga = acc(&mut grads[*a], g.len());
                for (((srow, drow), yrow), &inv) in ga
                    .chunks_exact_mut(w)
                    .zip(g.chunks_exact(w))
                    .zip(out.data().chunks_exact(w))
                    .zip(inv_norms)
                {
                    let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                    for ((s, d), y) in srow.iter_mut().zip(drow).zip(yrow) {
                        *s += inv * (d - y * dot);
                    }
                }
            }
            Op::Gather { a, idx } => {
                let ga = acc(&mut grads[*a], len(*a));
                for (&i, d) in idx.iter().zip(&g) {
                    if i >= 0 {
                        ga[i as usize] += d;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = len(p);
                    if rg(p) {
                        let gp = acc(&mut grads[p], n);
                        gp.iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(s, d)| *s += d);
                    }
                    off += n;
                }
            }
            &Op::Reshape(a) => {
                let ga = acc(&mut grads[a], len(a));
                ga.iter_mut().zip(&g).for_each(|(s, d)| *s += d);
            }
            &Op::Sum(a) => {
                let ga = acc(&mut grads[a], len(a));
                ga.iter_mut().for_each(|s| *s += g[0]);
            }
            &Op::Mean(a) => {
                let n = len(a);
                let ga = acc(&mut grads[a], n);
                let d = g[0] / n as f64;
                ga.iter_mut().for_each(|s| *s += d);
            }
            &Op::GroupMean { a, group } => {
                let c = out.last_dim();
                let ga = acc(&mut grads[a], len(a));
                let inv = 1.0 / group as f64;
                for (r, srow) in ga.chunks_exact_mut(c).enumerate() {
                    let drow = &g[(r / group) * c..(r / group + 1) * c];
                    srow.iter_mut().zip(drow).for_each(|(s, d)| *s += d * inv);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let w = nodes[*logits].value.last_dim();
                let rows = targets.len();
                let scale = g[0] / rows as f64;
                let vl = val(*logits);
                let ga = acc(&mut grads[*logits], rows * w);
                let mut p = vec![0.0; w];
                for ((srow, lrow), &t) in ga.chunks_exact_mut(w).zip(vl.chunks_exact(w)).zip(targets) {
                    softmax_row(lrow, &mut p);
                    p[t] -= 1.0;
                    srow.iter_mut().zip(&p).for_each(|(s, q)| *s += scale * q);
                }
            }
        }
    }
    grads
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> ! {
    panic!("{}", TensorError::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() })
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor {
        self.tape.value_ref(self.id).clone()
    }

    /// Borrow the value without copying.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.value_ref(self.id))
    }

    pub fn item(&self) -> Result<f64> {
        self.tape.value_ref(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    fn unary(&self, op: Op, name: &'static str, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let value = f(&self.tape.value_ref(self.id));
        self.tape.push(value, op, self.requires_grad(), name)
    }

    fn binary_same(&self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        let value = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            if a.shape() != b.shape() {
                mismatch(name, a.shape(), b.shape());
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg, name)
    }

    fn row_broadcast(&self, row: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        let value = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(row.id);
            let n = a.last_dim();
            if b.numel() != n {
                mismatch(name, a.shape(), b.shape());
            }
            let mut data = a.data().to_vec();
            for r in data.chunks_exact_mut(n) {
                r.iter_mut().zip(b.data()).for_each(|(x, &y)| *x = f(*x, y));
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        let rg = self.requires_grad() || row.requires_grad();
        self.tape.push(value, op, rg, name)
    }

    /// `self + row`, broadcasting a vector over the last axis.
    pub fn add_row(&self, row: Var<'t>) -> Var<'t> {
        self.row_broadcast(row, "add_row", Op::AddRow(self.id, row.id), |x, y| x + y)
    }

    /// `self * row`, broadcasting a vector over the last axis.
    pub fn mul_row(&self, row: Var<'t>) -> Var<'t> {
        self.row_broadcast(row, "mul_row", Op::MulRow(self.id, row.id), |x, y| x * y)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), "scale", |t| t.map(|x| x * c))
    }

    /// Multiply every element by a scalar variable.
    pub fn scale_by(&self, s: Var<'t>) -> Var<'t> {
        let value = {
            let a = self.tape.value_ref(self.id);
            let sv = self.tape.value_ref(s.id);
            if sv.numel() != 1 {
                mismatch("scale_by", a.shape(), sv.shape());
            }
            let c = sv.data()[0];
            a.map(|x| x * c)
        };
        let rg = self.requires_grad() || s.requires_grad();
        self.tape.push(value, Op::ScaleBy(self.id, s.id), rg, "scale_by")
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), "exp", |t| t.map(f64::exp))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), "relu", |t| t.map(|x| x.max(0.0)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), "gelu", |t| t.map(gelu))
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), "clamp", |t| t.map(|x| x.clamp(lo, hi)))
    }

    /// `[.., k] · [k, n] → [.., n]`; leading axes are flattened into rows.
    pub fn matmul(&self, w: Var<'t>) -> Var<'t> {
        let (value, m, k, n) = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(w.id);
            let k = a.last_dim();
            if b.ndim() != 2 || b.shape()[0] != k {
                mismatch("matmul", a.shape(), b.shape());
            }
            let m = a.numel() / k;
            let n = b.shape()[1];
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, false);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            (Tensor::from_parts(shape, out), m, k, n)
        };
        let rg = self.requires_grad() || w.requires_grad();
        let op = Op::MatMul { a: self.id, b: w.id, m, k, n };
        self.tape.push(value, op, rg, "matmul")
    }

    /// Batched product `[B, m, k] · [B, k, n]`, or `[B, m, k] · [B, n, k]ᵀ`
    /// when `trans_b`.
    pub fn bmm(&self, other: Var<'t>, trans_b: bool) -> Var<'t> {
        let (value, batch, m, k, n) = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            if a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0] {
                mismatch("bmm", a.shape(), b.shape());
            }
            let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (bk, n) = if trans_b {
                (b.shape()[2], b.shape()[1])
            } else {
                (b.shape()[1], b.shape()[2])
            };
            if bk != k {
                mismatch("bmm", a.shape(), b.shape());
            }
            let mut out = vec![0.0; batch * m * n];
            let bstride = if trans_b { (1, k) } else { (n, 1) };
            for t in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[t * m * k..(t + 1) * m * k],
                    (k, 1),
                    &b.data()[t * k * n..(t + 1) * k * n],
                    bstride,
                    &mut out[t * m * n..(t + 1) * m * n],
                    false,
                );
            }
            (Tensor::from_parts(vec![batch, m, n], out), batch, m, k, n)
        };
        let rg = self.requires_grad() || other.requires_grad();
        let op = Op::Bmm {
            a: self.id,
            b: other.id,
            batch,
            m,
            k,
            n,
            trans_b,
        };
        self.tape.push(value, op, rg, "bmm")
    }

    /// Normalize each last-axis row to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, eps: f64) -> Var<'t> {
        let (value, rstd) = {
            let a = self.tape.value_ref(self.id);
            let w = a.last_dim();
            let mut out = a.data().to_vec();
            let mut rstd = Vec::with_capacity(out.len() / w);
            for row in out.chunks_exact_mut(w) {
                let mean = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w as f64;
                let r = 1.0 / (var + eps).sqrt();
                row.iter_mut().for_each(|x| *x = (*x - mean) * r);
                rstd.push(r);
            }
            (Tensor::from_parts(a.shape().to_vec(), out), rstd)
        };
        let op = Op::LayerNorm { a: self.id, rstd };
        self.tape.push(value, op, self.requires_grad(), "layer_norm")
    }

    pub fn softmax(&self) -> Var<'t> {
        self.unary(Op::Softmax(self.id), "softmax", |t| {
            crate::functional::softmax(t).expect("positive extents")
        })
    }

    pub fn log_softmax(&self) -> Var<'t> {
        self.unary(Op::LogSoftmax(self.id), "log_softmax", |t| {
            let w = t.last_dim();
            let mut out = vec![0.0; t.numel()];
            for (r, o) in t.data().chunks_exact(w).zip(out.chunks_exact_mut(w)) {
                log_softmax_row(r, o);
            }
            Tensor::from_parts(t.shape().to_vec(), out)
        })
    }

    /// Scale each last-axis row to unit Euclidean norm.
    pub fn l2_normalize(&self) -> Var<'t> {
        let (value, inv_norms) = {
            let a = self.tape.value_ref(self.id);
            let w = a.last_dim();
            let mut out = a.data().to_vec();
            let mut inv_norms = Vec::with_capacity(out.len() / w);
            for row in out.chunks_exact_mut(w) {
                let inv = 1.0 / row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.iter_mut().for_each(|x| *x *= inv);
                inv_norms.push(inv);
            }
            (Tensor::from_parts(a.shape().to_vec(), out), inv_norms)
        };
        let op = Op::L2Normalize { a: self.id, inv_norms };
        self.tape.push(value, op, self.requires_grad(), "l2_normalize")
    }

    /// Element gather: `out[i] = self[idx[i]]`, or 0 where `idx[i] < 0`.
    pub fn gather(&self, idx: Vec<isize>, shape: impl Into<Vec<usize>>) -> Var<'t> {
        let shape = shape.into();
        let value = {
            let a = self.tape.value_ref(self.id);
            if shape.iter().product::<usize>() != idx.len() {
                mismatch("gather", &shape, &[idx.len()]);
            }
            let src = a.data();
            let data = idx
                .iter()
                .map(|&i| if i < 0 { 0.0 } else { src[i as usize] })
                .collect();
            Tensor::from_parts(shape, data)
        };
        let op = Op::Gather { a: self.id, idx };
        self.tape.push(value, op, self.requires_grad(), "gather")
    }

    /// Gather whole last-axis rows: `out[i] = self.row(rows[i])`.
    pub fn gather_rows(&self, rows: &[usize]) -> Var<'t> {
        let w = self.with_value(|t| t.last_dim());
        let idx = rows
            .iter()
            .flat_map(|&r| (r * w..(r + 1) * w).map(|i| i as isize))
            .collect();
        self.gather(idx, vec![rows.len(), w])
    }

    /// Row-major reinterpretation with a new shape.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<'t> {
        let shape = shape.into();
        let value = {
            let a = self.tape.value_ref(self.id);
            if shape.iter().product::<usize>() != a.numel() {
                mismatch("reshape", a.shape(), &shape);
            }
            Tensor::from_parts(shape, a.data().to_vec())
        };
        self.tape
            .push(value, Op::Reshape(self.id), self.requires_grad(), "reshape")
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), "sum", |t| Tensor::scalar(t.data().iter().sum()))
    }

    pub fn mean(&self) -> Var<'t> {
        self.unary(Op::Mean(self.id), "mean", |t| {
            Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
        })
    }

    /// `[G·group, C] → [G, C]`, averaging consecutive blocks of rows.
    pub fn group_mean(&self, group: usize) -> Var<'t> {
        let value = {
            let a = self.tape.value_ref(self.id);
            let c = a.last_dim();
            let rows = a.numel() / c;
            if group == 0 || rows % group != 0 {
                mismatch("group_mean", a.shape(), &[group]);
            }
            let g = rows / group;
            let mut out = vec![0.0; g * c];
            for (r, row) in a.data().chunks_exact(c).enumerate() {
                let o = &mut out[(r / group) * c..(r / group + 1) * c];
                o.iter_mut().zip(row).for_each(|(s, x)| *s += x);
            }
            let inv = 1.0 / group as f64;
            out.iter_mut().for_each(|v| *v *= inv);
            Tensor::from_parts(vec![g, c], out)
        };
        let op = Op::GroupMean { a: self.id, group };
        self.tape.push(value, op, self.requires_grad(), "group_mean")
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_ref(self.id);
            let w = a.last_dim();
            let rows = a.numel() / w;
            if rows != targets.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "cross_entropy",
                    left: a.shape().to_vec(),
                    right: vec![targets.len()],
                });
            }
            let mut ls = vec![0.0; w];
            let mut total = 0.0;
            for (row, &t) in a.data().chunks_exact(w).zip(targets) {
                if t >= w {
                    return Err(TensorError::IndexOutOfRange { index: t, classes: w });
                }
                log_softmax_row(row, &mut ls);
                total -= ls[t];
            }
            Tensor::scalar((total / rows as f64).max(0.0))
        };
        let op = Op::CrossEntropy {
            logits: self.id,
            targets: targets.to_vec(),
        };
        Ok(self.tape.push(value, op, self.requires_grad(), "cross_entropy"))
    }
}

/// Concatenate along the first axis. All parts share trailing axes.
pub fn concat<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat of nothing");
    let tape = parts[0].tape;
    let value = {
        let first = tape.value_ref(parts[0].id);
        let tail = first.shape()[1.min(first.ndim())..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = tape.value_ref(p.id);
            if v.ndim() == 0 || v.shape()[1..] != tail[..] {
                mismatch("concat", first.shape(), v.shape());
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        Tensor::from_parts(shape, data)
    };
    let rg = parts.iter().any(|p| p.requires_grad());
    tape.push(value, Op::Concat(parts.iter().map(|p| p.id).collect()), rg, "concat")
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary_same(rhs, "add", Op::Add(self.id, rhs.id), |x, y| x + y)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary_same(rhs, "sub", Op::Sub(self.id, rhs.id), |x, y| x - y)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary_same(rhs, "mul", Op::Mul(self.id, rhs.id), |x, y| x * y)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
