//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the [`Tape`] holding its forward value
//! and whatever it needs to compute the vector-Jacobian product later. Nodes
//! are appended in evaluation order, so a reverse sweep over the tape is a
//! valid topological order for backpropagation.
//!
//! ```
//! use xfer_tensor::{ParamSet, Tape, Tensor};
//!
//! let mut params = ParamSet::<f64>::new();
//! let x = params.insert("x", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let tape = Tape::new();
//! let xv = tape.param(&params, x);
//! let loss = xv.mul(xv).unwrap().sum();
//! tape.backward(loss, &mut params).unwrap();
//! assert_eq!(params.get(x).grad.as_deref(), Some(&[2.0, 4.0][..]));
//! ```

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamSet};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBcast(usize, usize),
    MulBcast(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Reshape(usize),
    Transpose {
        a: usize,
        d0: usize,
        d1: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    LayerNorm {
        a: usize,
        rstd: Vec<T>,
    },
    Gelu(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    CausalMask(usize),
    Dropout {
        a: usize,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(usize),
    Mean(usize),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients of leaves created with [`Tape::var`] and [`Tape::param`].
pub struct Gradients<T> {
    by_node: HashMap<usize, Vec<T>>,
}

impl<T> Gradients<T> {
    pub fn get<R: Real>(&self, var: Var<'_, R>) -> Option<&[T]> {
        self.by_node.get(&var.id).map(Vec::as_slice)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_shared(shape, Arc::new(value), op, requires_grad)
    }

    fn push_shared(&self, shape: Vec<usize>, value: Arc<Vec<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A constant input; receives no gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        let shape = t.shape().to_vec();
        self.push_shared(shape, Arc::clone(t.shared()), Op::Leaf, false)
    }

    /// A differentiable leaf that is not part of any parameter set; its
    /// gradient is available through [`Tape::gradients`].
    pub fn var(&self, t: Tensor<T>) -> Var<'_, T> {
        let shape = t.shape().to_vec();
        self.push_shared(shape, Arc::clone(t.shared()), Op::Leaf, true)
    }

    /// Places a trainable parameter on the tape. Storage is shared, not copied.
    pub fn param(&self, params: &ParamSet<T>, id: ParamId) -> Var<'_, T> {
        let t = &params.get(id).value;
        let shape = t.shape().to_vec();
        self.push_shared(shape, Arc::clone(t.shared()), Op::Param(id.0), true)
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    fn value_of(&self, id: usize) -> Arc<Vec<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from `loss`; returns the gradient of every leaf reached.
    fn propagate(&self, loss: usize) -> Result<Vec<Option<Vec<T>>>> {
        let nodes = self.nodes.borrow();
        if numel(&nodes[loss].shape) != 1 {
            return Err(TensorError::NonScalarLoss(nodes[loss].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss + 1);
        grads.resize_with(loss + 1, || None);
        grads[loss] = Some(vec![T::one()]);

        for i in (0..=loss).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param(_)) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(&nodes, &mut grads, node, &g);
        }
        Ok(grads)
    }

    /// Accumulates `∂loss/∂p` into the `grad` buffer of every parameter.
    /// Gradients add up across calls until [`ParamSet::zero_grad`].
    pub fn backward(&self, loss: Var<'_, T>, params: &mut ParamSet<T>) -> Result<()> {
        let grads = self.propagate(loss.id)?;
        for p in params.iter_mut() {
            if p.grad.is_none() {
                p.grad = Some(vec![T::zero(); p.value.numel()]);
            }
        }
        let nodes = self.nodes.borrow();
        for (i, g) in grads.into_iter().enumerate() {
            let (Op::Param(idx), Some(g)) = (&nodes[i].op, g) else {
                continue;
            };
            if *idx >= params.len() {
                return Err(TensorError::ParamSetMismatch {
                    index: *idx,
                    len: params.len(),
                });
            }
            let p = params.get_mut(ParamId(*idx));
            if p.value.numel() != g.len() {
                return Err(TensorError::shape("backward", p.value.shape(), &nodes[i].shape));
            }
            let dst = p.grad.as_mut().expect("allocated above");
            dst.iter_mut().zip(&g).for_each(|(d, s)| *d += *s);
        }
        Ok(())
    }

    /// Gradients of `loss` with respect to every differentiable leaf.
    pub fn gradients(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let grads = self.propagate(loss.id)?;
        let nodes = self.nodes.borrow();
        let by_node = grads
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| match (&nodes[i].op, g) {
                (Op::Leaf | Op::Param(_), Some(g)) => Some((i, g)),
                (Op::Leaf | Op::Param(_), None) if nodes[i].requires_grad => {
                    Some((i, vec![T::zero(); nodes[i].value.len()]))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { by_node })
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, f: impl FnOnce(&mut [T])) {
    if !nodes[id].requires_grad {
        return;
    }
    let len = nodes[id].value.len();
    f(grads[id].get_or_insert_with(|| vec![T::zero(); len]));
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}

fn backward_node<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        } => {
            let (a, b, batch, m, k, n) = (*a, *b, *batch, *m, *k, *n);
            let av = Arc::clone(&nodes[a].value);
            let bv = Arc::clone(&nodes[b].value);
            if *shared_rhs {
                let rows = batch * m;
                accumulate(nodes, grads, a, |da| T::gemm(rows, n, k, g, false, &bv, true, da, true));
                accumulate(nodes, grads, b, |db| T::gemm(k, rows, n, &av, true, g, false, db, true));
            } else {
                accumulate(nodes, grads, a, |da| {
                    for s in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[s * m * n..],
                            false,
                            &bv[s * k * n..],
                            true,
                            &mut da[s * m * k..],
                            true,
                        );
                    }
                });
                accumulate(nodes, grads, b, |db| {
                    for s in 0..batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            &av[s * m * k..],
                            true,
                            &g[s * m * n..],
                            false,
                            &mut db[s * k * n..],
                            true,
                        );
                    }
                });
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, s)| *d -= *s));
        }
        Op::Mul(a, b) => {
            let av = Arc::clone(&nodes[*a].value);
            let bv = Arc::clone(&nodes[*b].value);
            accumulate(nodes, grads, *a, |d| {
                for ((d, s), y) in d.iter_mut().zip(g).zip(bv.iter()) {
                    *d += *s * *y;
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((d, s), x) in d.iter_mut().zip(g).zip(av.iter()) {
                    *d += *s * *x;
                }
            });
        }
        Op::AddBcast(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, g));
            accumulate(nodes, grads, *b, |d| {
                let w = d.len();
                for chunk in g.chunks_exact(w) {
                    add_into(d, chunk);
                }
            });
        }
        Op::MulBcast(a, b) => {
            let av = Arc::clone(&nodes[*a].value);
            let bv = Arc::clone(&nodes[*b].value);
            let w = bv.len();
            accumulate(nodes, grads, *a, |d| {
                for (dc, gc) in d.chunks_exact_mut(w).zip(g.chunks_exact(w)) {
                    for ((d, s), y) in dc.iter_mut().zip(gc).zip(bv.iter()) {
                        *d += *s * *y;
                    }
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for (gc, ac) in g.chunks_exact(w).zip(av.chunks_exact(w)) {
                    for ((d, s), x) in d.iter_mut().zip(gc).zip(ac) {
                        *d += *s * *x;
                    }
                }
            });
        }
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(nodes, grads, *a, |d| {
                d.iter_mut().zip(g).for_each(|(d, s)| *d += c * *s)
            });
        }
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, |d| add_into(d, g)),
        Op::Transpose { a, d0, d1 } => {
            let back = transpose_copy(g, &node.shape, *d0, *d1);
            accumulate(nodes, grads, *a, |d| add_into(d, &back));
        }
        Op::Softmax { a, axis } => {
            let y = &node.value;
            let (outer, len, inner) = split_axis(&node.shape, *axis);
            accumulate(nodes, grads, *a, |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            let idx = base + j * inner;
                            dot += g[idx] * y[idx];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            d[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm { a, rstd } => {
            let xhat = &node.value;
            let w = *node.shape.last().expect("layer_norm input has a last axis");
            let inv_w = T::one() / T::of(w as f64);
            accumulate(nodes, grads, *a, |d| {
                for (r, ((dr, gr), xr)) in d
                    .chunks_exact_mut(w)
                    .zip(g.chunks_exact(w))
                    .zip(xhat.chunks_exact(w))
                    .enumerate()
                {
                    let mean_g = gr.iter().copied().sum::<T>() * inv_w;
                    let mean_gx = gr.iter().zip(xr).map(|(a, b)| *a * *b).sum::<T>() * inv_w;
                    for ((d, gi), xi) in dr.iter_mut().zip(gr).zip(xr) {
                        *d += rstd[r] * (*gi - mean_g - *xi * mean_gx);
                    }
                }
            });
        }
        Op::Gelu(a) => {
            let xv = Arc::clone(&nodes[*a].value);
            accumulate(nodes, grads, *a, |d| {
                for ((d, s), x) in d.iter_mut().zip(g).zip(xv.iter()) {
                    *d += *s * gelu_grad(*x);
                }
            });
        }
        Op::Embedding { table, ids } => {
            let w = *node.shape.last().expect("embedding output is 2-d");
            accumulate(nodes, grads, *table, |d| {
                for (row, &id) in ids.iter().enumerate() {
                    add_into(&mut d[id * w..(id + 1) * w], &g[row * w..(row + 1) * w]);
                }
            });
        }
        Op::Slice { a, axis, start } => {
            let in_shape = nodes[*a].shape.clone();
            let (outer, in_len, inner) = split_axis(&in_shape, *axis);
            let out_len = node.shape[*axis];
            let start = *start;
            accumulate(nodes, grads, *a, |d| {
                for o in 0..outer {
                    let src = &g[o * out_len * inner..(o + 1) * out_len * inner];
                    let dst = &mut d[(o * in_len + start) * inner..(o * in_len + start + out_len) * inner];
                    add_into(dst, src);
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(&node.shape, *axis);
            let mut offset = 0;
            for &input in inputs {
                let len = nodes[input].shape[*axis];
                accumulate(nodes, grads, input, |d| {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                    }
                });
                offset += len;
            }
        }
        Op::CausalMask(a) => {
            let (rows, cols) = last_two(&node.shape);
            accumulate(nodes, grads, *a, |d| {
                for (dm, gm) in d.chunks_exact_mut(rows * cols).zip(g.chunks_exact(rows * cols)) {
                    for r in 0..rows {
                        let keep = (r + 1).min(cols);
                        add_into(&mut dm[r * cols..r * cols + keep], &gm[r * cols..r * cols + keep]);
                    }
                }
            });
        }
        Op::Dropout { a, mask } => {
            accumulate(nodes, grads, *a, |d| {
                for ((d, s), m) in d.iter_mut().zip(g).zip(mask) {
                    *d += *s * *m;
                }
            });
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let rows = targets.len();
            let v = probs.len() / rows.max(1);
            let scale = g[0] / T::of(rows as f64);
            accumulate(nodes, grads, *logits, |d| {
                for (r, &t) in targets.iter().enumerate() {
                    let dr = &mut d[r * v..(r + 1) * v];
                    let pr = &probs[r * v..(r + 1) * v];
                    for (d, p) in dr.iter_mut().zip(pr) {
                        *d += scale * *p;
                    }
                    dr[t] -= scale;
                }
            });
        }
        Op::Sum(a) => {
            let s = g[0];
            accumulate(nodes, grads, *a, |d| d.iter_mut().for_each(|d| *d += s));
        }
        Op::Mean(a) => {
            let s = g[0] / T::of(nodes[*a].value.len() as f64);
            accumulate(nodes, grads, *a, |d| d.iter_mut().for_each(|d| *d += s));
        }
    }
}

/// `(outer, len, inner)` sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn last_two(shape: &[usize]) -> (usize, usize) {
    let n = shape.len();
    (shape[n - 2], shape[n - 1])
}

/// Swaps axes `d0 < d1` of a row-major buffer with the given shape.
fn transpose_copy<T: Real>(x: &[T], shape: &[usize], d0: usize, d1: usize) -> Vec<T> {
    let (d0, d1) = if d0 < d1 { (d0, d1) } else { (d1, d0) };
    let a: usize = shape[..d0].iter().product();
    let s0 = shape[d0];
    let b: usize = shape[d0 + 1..d1].iter().product();
    let s1 = shape[d1];
    let c: usize = shape[d1 + 1..].iter().product();
    let mut out = Vec::with_capacity(x.len());
    for ai in 0..a {
        for j in 0..s1 {
            for bi in 0..b {
                for i in 0..s0 {
                    let src = ((((ai * s0 + i) * b + bi) * s1) + j) * c;
                    out.extend_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

fn gelu<T: Real>(x: T) -> T {
    let x64 = x.as_f64();
    let u = SQRT_2_OVER_PI * (x64 + GELU_COEF * x64 * x64 * x64);
    T::of(0.5 * x64 * (1.0 + u.tanh()))
}

fn gelu_grad<T: Real>(x: T) -> T {
    let x = x.as_f64();
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    T::of(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn value(&self) -> Tensor<T> {
        Tensor::from_shared(self.shape(), self.tape.value_of(self.id))
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> T {
        self.tape.value_of(self.id)[0]
    }

    fn rg(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'_, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables belong to different tapes"
        );
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape
            .push_shared(self.shape(), self.tape.value_of(self.id), Op::Leaf, false)
    }

    /// Matrix product over the last two axes. `rhs` is either `[k, n]`,
    /// shared by every leading batch index of `self`, or has the same
    /// leading batch dimensions as `self`.
    pub fn matmul(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let ls = self.shape();
        let rs = rhs.shape();
        if ls.len() < 2 || rs.len() < 2 {
            return Err(TensorError::shape("matmul", &ls, &rs));
        }
        let (m, k) = last_two(&ls);
        let (k2, n) = last_two(&rs);
        let shared_rhs = rs.len() == 2;
        if k != k2 || (!shared_rhs && ls[..ls.len() - 2] != rs[..rs.len() - 2]) {
            return Err(TensorError::shape("matmul", &ls, &rs));
        }
        let batch: usize = ls[..ls.len() - 2].iter().product();
        let av = self.tape.value_of(self.id);
        let bv = self.tape.value_of(rhs.id);
        let mut out = vec![T::zero(); batch * m * n];
        if shared_rhs {
            T::gemm(batch * m, k, n, &av, false, &bv, false, &mut out, false);
        } else {
            for s in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[s * m * k..],
                    false,
                    &bv[s * k * n..],
                    false,
                    &mut out[s * m * n..],
                    false,
                );
            }
        }
        let mut shape = ls[..ls.len() - 2].to_vec();
        shape.extend([m, n]);
        let op = Op::MatMul {
            a: self.id,
            b: rhs.id,
            batch,
            m,
            k,
            n,
            shared_rhs,
        };
        Ok(self.tape.push(shape, out, op, self.rg() || rhs.rg()))
    }

    fn zip_with(&self, rhs: Var<'t, T>, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let ls = self.shape();
        let rs = rhs.shape();
        if ls != rs {
            return Err(TensorError::shape(name, &ls, &rs));
        }
        let a = self.tape.value_of(self.id);
        let b = self.tape.value_of(rhs.id);
        let out = a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)).collect();
        Ok(self.tape.push(ls, out, op, self.rg() || rhs.rg()))
    }

    pub fn add(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(rhs, "add", |x, y| x + y, Op::Add(self.id, rhs.id))
    }

    pub fn sub(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(rhs, "sub", |x, y| x - y, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(rhs, "mul", |x, y| x * y, Op::Mul(self.id, rhs.id))
    }

    fn bcast(&self, rhs: Var<'t, T>, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let ls = self.shape();
        let rs = rhs.shape();
        if rs.is_empty() || rs.len() > ls.len() || ls[ls.len() - rs.len()..] != rs[..] {
            return Err(TensorError::shape(name, &ls, &rs));
        }
        let a = self.tape.value_of(self.id);
        let b = self.tape.value_of(rhs.id);
        let mut out = Vec::with_capacity(a.len());
        for chunk in a.chunks_exact(b.len()) {
            out.extend(chunk.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)));
        }
        Ok(self.tape.push(ls, out, op, self.rg() || rhs.rg()))
    }

    /// `self + rhs` where `rhs` matches the trailing axes of `self` and is
    /// repeated over the leading ones.
    pub fn add_bcast(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.bcast(rhs, "add_bcast", |x, y| x + y, Op::AddBcast(self.id, rhs.id))
    }

    pub fn mul_bcast(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.bcast(rhs, "mul_bcast", |x, y| x * y, Op::MulBcast(self.id, rhs.id))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let out = self.tape.value_of(self.id).iter().map(|x| *x * c).collect();
        self.tape.push(self.shape(), out, Op::Scale(self.id, c), self.rg())
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        let out = self.tape.value_of(self.id).iter().map(|x| *x + c).collect();
        self.tape.push(self.shape(), out, Op::AddScalar(self.id), self.rg())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let cur = self.shape();
        if numel(shape) != numel(&cur) {
            return Err(TensorError::shape("reshape", &cur, shape));
        }
        Ok(self.tape.push_shared(
            shape.to_vec(),
            self.tape.value_of(self.id),
            Op::Reshape(self.id),
            self.rg(),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, d0: usize, d1: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if d0 >= shape.len() || d1 >= shape.len() {
            return Err(TensorError::invalid(
                "transpose",
                &shape,
                format!("axes ({d0}, {d1}) out of range"),
            ));
        }
        if d0 == d1 {
            return self.reshape(&shape);
        }
        let out = transpose_copy(&self.tape.value_of(self.id), &shape, d0, d1);
        let mut out_shape = shape;
        out_shape.swap(d0, d1);
        let op = Op::Transpose { a: self.id, d0, d1 };
        Ok(self.tape.push(out_shape, out, op, self.rg()))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::invalid("softmax", &shape, format!("bad axis {axis}")));
        }
        let x = self.tape.value_of(self.id);
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len).map(|j| x[base + j * inner]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (x[base + j * inner] - max).exp();
                    y[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    y[base + j * inner] /= sum;
                }
            }
        }
        Ok(self.tape.push(shape, y, Op::Softmax { a: self.id, axis }, self.rg()))
    }

    /// Normalizes the last axis to zero mean and unit variance; no affine
    /// parameters.
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let w = match shape.last() {
            Some(&w) if w > 0 => w,
            _ => {
                return Err(TensorError::invalid(
                    "layer_norm",
                    &shape,
                    "needs a non-empty last axis",
                ))
            }
        };
        let x = self.tape.value_of(self.id);
        let eps = T::of(eps);
        let inv_w = T::one() / T::of(w as f64);
        let mut y = Vec::with_capacity(x.len());
        let mut rstd = Vec::with_capacity(x.len() / w);
        for row in x.chunks_exact(w) {
            let mean = row.iter().copied().sum::<T>() * inv_w;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_w;
            let r = T::one() / (var + eps).sqrt();
            y.extend(row.iter().map(|v| (*v - mean) * r));
            rstd.push(r);
        }
        Ok(self.tape.push(shape, y, Op::LayerNorm { a: self.id, rstd }, self.rg()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t, T> {
        let out = self.tape.value_of(self.id).iter().map(|x| gelu(*x)).collect();
        self.tape.push(self.shape(), out, Op::Gelu(self.id), self.rg())
    }

    /// Rows of a `[vocab, width]` table selected by `ids`; output `[ids.len(), width]`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::invalid("embedding", &shape, "table must be 2-d"));
        }
        let (rows, w) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                size: rows,
            });
        }
        let table = self.tape.value_of(self.id);
        let mut out = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            out.extend_from_slice(&table[id * w..(id + 1) * w]);
        }
        let op = Op::Embedding {
            table: self.id,
            ids: ids.to_vec(),
        };
        Ok(self.tape.push(vec![ids.len(), w], out, op, self.rg()))
    }

    /// `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                &shape,
                format!("range {start}..{end} on axis {axis}"),
            ));
        }
        let x = self.tape.value_of(self.id);
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let op = Op::Slice {
            a: self.id,
            axis,
            start,
        };
        Ok(self.tape.push(out_shape, out, op, self.rg()))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", &[], "no inputs"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", &base, format!("bad axis {axis}")));
        }
        let mut total = 0;
        for p in parts {
            first.same_tape(p);
            let s = p.shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::shape("concat", &base, &s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let values: Vec<_> = parts.iter().map(|p| first.tape.value_of(p.id)).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, v) in parts.iter().zip(&values) {
                let len = p.shape()[axis];
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|p| p.rg());
        let op = Op::Concat {
            inputs: parts.iter().map(|p| p.id).collect(),
            axis,
        };
        Ok(first.tape.push(shape, out, op, rg))
    }

    /// Sets entries above the diagonal of the last two axes to `-inf`.
    pub fn causal_mask(&self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(TensorError::invalid("causal_mask", &shape, "needs at least 2 axes"));
        }
        let (rows, cols) = last_two(&shape);
        let mut out = self.tape.value_of(self.id).as_ref().clone();
        for m in out.chunks_exact_mut(rows * cols) {
            for r in 0..rows {
                for v in &mut m[r * cols + (r + 1).min(cols)..(r + 1) * cols] {
                    *v = T::neg_infinity();
                }
            }
        }
        Ok(self.tape.push(shape, out, Op::CausalMask(self.id), self.rg()))
    }

    /// Inverted dropout with a mask drawn from `seed`.
    pub fn dropout(&self, p: f64, seed: u64) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid(
                "dropout",
                &self.shape(),
                format!("probability {p} outside [0, 1)"),
            ));
        }
        if p == 0.0 {
            return Ok(*self);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = self.tape.value_of(self.id);
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = x.iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let op = Op::Dropout { a: self.id, mask };
        Ok(self.tape.push(self.shape(), out, op, self.rg()))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[rows, vocab]` logits.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != targets.len() || shape[0] == 0 {
            return Err(TensorError::shape("cross_entropy", &shape, &[targets.len()]));
        }
        let v = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                size: v,
            });
        }
        let x = self.tape.value_of(self.id);
        let mut probs = vec![T::zero(); x.len()];
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * v..(r + 1) * v];
            let pr = &mut probs[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (p, z) in pr.iter_mut().zip(row) {
                *p = (*z - max).exp();
                sum += *p;
            }
            pr.iter_mut().for_each(|p| *p /= sum);
            total += (max + sum.ln() - row[t]).as_f64();
        }
        let loss = T::of(total / targets.len() as f64);
        let op = Op::CrossEntropy {
            logits: self.id,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.tape.push(Vec::new(), vec![loss], op, self.rg()))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.tape.value_of(self.id).iter().copied().sum();
        self.tape.push(Vec::new(), vec![s], Op::Sum(self.id), self.rg())
    }

    pub fn mean(&self) -> Var<'t, T> {
        let x = self.tape.value_of(self.id);
        let s = x.iter().copied().sum::<T>() / T::of(x.len() as f64);
        self.tape.push(Vec::new(), vec![s], Op::Mean(self.id), self.rg())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_with_identity() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(a.matmul(i).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let msg = a.matmul(b).err().unwrap().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[3]));
        for p in x.softmax(0).unwrap().value().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 5.0, 0.0, 5.0]));
        let y = x.softmax(0).unwrap().value();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 8], 3.25f64));
        assert!(x.layer_norm(1e-5).unwrap().value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sum_grad_is_ones_and_square_grad_is_twice_x() {
        let tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]));
        let g = tape.gradients(x.sum()).unwrap();
        assert_eq!(g.get(x), Some(&[1.0, 1.0][..]));

        let tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]));
        let g = tape.gradients(x.mul(x).unwrap().sum()).unwrap();
        assert_eq!(g.get(x), Some(&[2.0, 4.0][..]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.var(Tensor::<f64>::zeros(&[2]));
        assert!(matches!(tape.gradients(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn detached_value_gets_no_grad() {
        let tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]));
        let y = x.detach();
        let loss = x.mul(y).unwrap().sum();
        let g = tape.gradients(loss).unwrap();
        // Only the direct path contributes: d/dx (x * stop(x)) = x.
        assert_eq!(g.get(x), Some(&[1.0, 2.0][..]));
        assert!(g.get(y).is_none());
    }

    #[test]
    fn backward_accumulates_and_zero_grad_resets() {
        let mut params = ParamSet::new();
        let id = params.insert("w", t(&[2], &[1.0, -3.0]));
        let run = |params: &mut ParamSet<f64>| {
            let tape = Tape::new();
            let w = tape.param(params, id);
            let loss = w.mul(w).unwrap().sum();
            tape.backward(loss, params).unwrap();
        };
        run(&mut params);
        let single = params.get(id).grad.clone().unwrap();
        run(&mut params);
        let double = params.get(id).grad.clone().unwrap();
        assert_eq!(double, single.iter().map(|g| 2.0 * g).collect::<Vec<_>>());
        params.zero_grad();
        run(&mut params);
        assert_eq!(params.get(id).grad.as_ref().unwrap(), &single);
    }

    #[test]
    fn unreached_params_still_get_a_grad_buffer() {
        let mut params = ParamSet::new();
        let used = params.insert("used", t(&[1], &[2.0]));
        let unused = params.insert("unused", t(&[3], &[0.0; 3]));
        let tape = Tape::new();
        let loss = tape.param(&params, used).sum();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(unused).grad.as_deref(), Some(&[0.0; 3][..]));
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let tape = Tape::new();
        let table = tape.constant(Tensor::<f32>::zeros(&[4, 2]));
        assert!(matches!(
            table.embedding(&[1, 4]),
            Err(TensorError::IndexOutOfRange { index: 4, size: 4, .. })
        ));
    }

    #[test]
    fn causal_mask_keeps_lower_triangle() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::full(&[2, 2], 1.0));
        let y = x.causal_mask().unwrap().softmax(1).unwrap().value();
        assert_eq!(y.data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn transpose_middle_axes() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 3, 1], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let y = x.transpose(1, 2).unwrap();
        assert_eq!(y.shape(), vec![1, 3, 2, 1]);
        assert_eq!(y.value().data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn slice_then_concat_roundtrips() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let a = x.slice(1, 0, 1).unwrap();
        let b = x.slice(1, 1, 3).unwrap();
        assert_eq!(a.value().data(), &[0.0, 3.0]);
        let y = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn dropout_zero_is_identity_and_seeded() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f32>::full(&[64], 1.0));
        assert_eq!(x.dropout(0.0, 1).unwrap().value(), x.value());
        let a = x.dropout(0.5, 7).unwrap().value();
        let b = x.dropout(0.5, 7).unwrap().value();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_vocab() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[3, 4]));
        let ce = x.cross_entropy(&[0, 1, 3]).unwrap().item();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
    }
}
