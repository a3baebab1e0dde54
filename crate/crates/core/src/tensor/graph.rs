use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, AxisTaps};
use super::{Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Recorded operation. Parents are node ids; caches hold what the backward
/// pass needs beyond the parent and output values.
enum Op<T> {
    Leaf,
    /// Result of an operation whose inputs do not require gradients.
    Detached,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddBias { x: usize, b: usize },
    BroadcastRows { x: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize, bt: bool },
    Transpose { a: usize, rows: usize, cols: usize },
    Reshape(usize),
    NarrowCols { a: usize, start: usize, len: usize, cols: usize },
    ConcatCols { parts: Vec<(usize, usize)> },
    Softmax { a: usize, outer: usize, n: usize, inner: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, d: usize, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(usize),
    Sigmoid(usize),
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom, cols: Vec<T> },
    ConvTranspose2d { x: usize, w: usize, b: usize, geom: ConvGeom },
    Resize { a: usize, c: usize, h: usize, w: usize, ys: AxisTaps<T>, xs: AxisTaps<T> },
    Sum(usize),
    Mean(usize),
    FocalLoss { logits: usize, target: Vec<bool>, gamma: T, eps: T },
}

/// Input geometry of a (transposed) convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// A reverse-mode differentiation tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order of the graph.
pub struct Graph<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar = f32> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every node that required them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// A graph that never tracks gradients; used for inference.
    pub fn no_grad() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient in [`Graph::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, self.grad_enabled, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, false, Op::Leaf)
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad || matches!(op, Op::Leaf) { op } else { Op::Detached };
        nodes.push(Node { value: Rc::new(value), requires_grad, op });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        self.grad_enabled && ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn check_same(&self, a: Var<'_, T>, b: Var<'_, T>) -> Result<()> {
        self.check_owner(a)?;
        self.check_owner(b)
    }

    fn check_owner(&self, v: Var<'_, T>) -> Result<()> {
        if std::ptr::eq(v.graph, self) {
            Ok(())
        } else {
            Err(Error::Contract("variable belongs to a different graph".into()))
        }
    }

    /// Concatenates 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| dim_err("concat of zero tensors"))?;
        let rows = first.shape2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            self.check_owner(*p)?;
            let (r, c) = p.shape2()?;
            if r != rows {
                return Err(dim_err(format!(
                    "concat_cols row mismatch: {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); rows * total];
        let mut offset = 0;
        for (p, &wd) in parts.iter().zip(&widths) {
            let v = p.value();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + wd]
                    .copy_from_slice(&v.data()[r * wd..(r + 1) * wd]);
            }
            offset += wd;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.requires(&ids);
        let parts = ids.into_iter().zip(widths).collect();
        Ok(self.push(Tensor::new(&[rows, total], out)?, rg, Op::ConcatCols { parts }))
    }

    /// Back-propagates from a scalar `loss`, returning gradients of every node
    /// that requires them. Contributions from repeated uses are summed.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.check_owner(loss)?;
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if !loss_node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if loss_node.requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop_node(&nodes, node, &gy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(gy);
            }
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor { shape: n.value.shape().to_vec(), data: g }))
            .collect();
        Ok(Gradients { grads })
    }
}

fn accum<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    make: impl FnOnce() -> Vec<T>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    let g = make();
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a = *a + v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    gy: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |id: usize| -> &[T] { nodes[id].value.data() };
    match &node.op {
        Op::Leaf | Op::Detached => {}
        Op::Add(a, b) => {
            accum(nodes, grads, *a, || gy.to_vec());
            accum(nodes, grads, *b, || gy.to_vec());
        }
        Op::Sub(a, b) => {
            accum(nodes, grads, *a, || gy.to_vec());
            accum(nodes, grads, *b, || gy.iter().map(|&g| -g).collect());
        }
        Op::Mul(a, b) => {
            accum(nodes, grads, *a, || gy.iter().zip(val(*b)).map(|(&g, &v)| g * v).collect());
            accum(nodes, grads, *b, || gy.iter().zip(val(*a)).map(|(&g, &v)| g * v).collect());
        }
        Op::Scale(a, c) => {
            accum(nodes, grads, *a, || gy.iter().map(|&g| g * *c).collect());
        }
        Op::AddBias { x, b } => {
            accum(nodes, grads, *x, || gy.to_vec());
            let n = nodes[*b].value.len();
            accum(nodes, grads, *b, || {
                let mut db = vec![T::zero(); n];
                for row in gy.chunks(n) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d = *d + g;
                    }
                }
                db
            });
        }
        Op::BroadcastRows { x } => {
            let n = nodes[*x].value.len();
            accum(nodes, grads, *x, || {
                let mut dx = vec![T::zero(); n];
                for row in gy.chunks(n) {
                    for (d, &g) in dx.iter_mut().zip(row) {
                        *d = *d + g;
                    }
                }
                dx
            });
        }
        &Op::MatMul { a, b, m, k, n, bt } => {
            let (av, bv) = (val(a), val(b));
            accum(nodes, grads, a, || {
                let mut da = vec![T::zero(); m * k];
                if bt {
                    T::gemm(m, n, k, gy, n as isize, 1, bv, k as isize, 1, T::zero(), &mut da);
                } else {
                    T::gemm(m, n, k, gy, n as isize, 1, bv, 1, n as isize, T::zero(), &mut da);
                }
                da
            });
            accum(nodes, grads, b, || {
                let mut db = vec![T::zero(); k * n];
                if bt {
                    T::gemm(n, m, k, gy, 1, n as isize, av, k as isize, 1, T::zero(), &mut db);
                } else {
                    T::gemm(k, m, n, av, 1, k as isize, gy, n as isize, 1, T::zero(), &mut db);
                }
                db
            });
        }
        &Op::Transpose { a, rows, cols } => {
            accum(nodes, grads, a, || transpose(gy, cols, rows));
        }
        Op::Reshape(a) => accum(nodes, grads, *a, || gy.to_vec()),
        &Op::NarrowCols { a, start, len, cols } => {
            accum(nodes, grads, a, || {
                let rows = gy.len() / len;
                let mut da = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    da[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&gy[r * len..(r + 1) * len]);
                }
                da
            });
        }
        Op::ConcatCols { parts } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let rows = gy.len() / total;
            let mut offset = 0;
            for &(id, wd) in parts {
                accum(nodes, grads, id, || {
                    let mut d = vec![T::zero(); rows * wd];
                    for r in 0..rows {
                        d[r * wd..(r + 1) * wd]
                            .copy_from_slice(&gy[r * total + offset..r * total + offset + wd]);
                    }
                    d
                });
                offset += wd;
            }
        }
        &Op::Softmax { a, outer, n, inner } => {
            let y = node.value.data();
            accum(nodes, grads, a, || {
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = T::zero();
                        for j in 0..n {
                            let idx = base + j * inner;
                            dot = dot + gy[idx] * y[idx];
                        }
                        for j in 0..n {
                            let idx = base + j * inner;
                            dx[idx] = y[idx] * (gy[idx] - dot);
                        }
                    }
                }
                dx
            });
        }
        Op::LayerNorm { x, gamma, beta, d, xhat, rstd } => {
            let d = *d;
            let gv = val(*gamma);
            accum(nodes, grads, *x, || {
                let df = T::from_usize(d).unwrap();
                let mut dx = vec![T::zero(); xhat.len()];
                for (r, ((dxr, xr), gr)) in
                    dx.chunks_mut(d).zip(xhat.chunks(d)).zip(gy.chunks(d)).enumerate()
                {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        s1 = s1 + dh;
                        s2 = s2 + dh * xr[j];
                    }
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dxr[j] = rstd[r] / df * (df * dh - s1 - xr[j] * s2);
                    }
                }
                dx
            });
            accum(nodes, grads, *gamma, || {
                let mut dg = vec![T::zero(); d];
                for (xr, gr) in xhat.chunks(d).zip(gy.chunks(d)) {
                    for j in 0..d {
                        dg[j] = dg[j] + gr[j] * xr[j];
                    }
                }
                dg
            });
            accum(nodes, grads, *beta, || {
                let mut db = vec![T::zero(); d];
                for gr in gy.chunks(d) {
                    for j in 0..d {
                        db[j] = db[j] + gr[j];
                    }
                }
                db
            });
        }
        Op::Gelu(a) => {
            let x = val(*a);
            accum(nodes, grads, *a, || {
                gy.iter().zip(x).map(|(&g, &v)| g * kernels::gelu_grad(v)).collect()
            });
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            accum(nodes, grads, *a, || {
                gy.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect()
            });
        }
        Op::Conv2d { x, w, b, geom, cols } => {
            let ConvGeom { c, h, w: wd, f, k, stride, pad } = *geom;
            let ckk = c * k * k;
            let p = gy.len() / f;
            let wv = val(*w);
            accum(nodes, grads, *w, || {
                let mut dw = vec![T::zero(); f * ckk];
                T::gemm(f, p, ckk, gy, p as isize, 1, cols, 1, p as isize, T::zero(), &mut dw);
                dw
            });
            accum(nodes, grads, *b, || gy.chunks(p).map(|r| sum_slice(r)).collect());
            accum(nodes, grads, *x, || {
                let mut dcols = vec![T::zero(); ckk * p];
                T::gemm(ckk, f, p, wv, 1, ckk as isize, gy, p as isize, 1, T::zero(), &mut dcols);
                kernels::col2im(&dcols, c, h, wd, k, stride, pad)
            });
        }
        Op::ConvTranspose2d { x, w, b, geom } => {
            let ConvGeom { c, h, w: wd, f, k, stride, pad } = *geom;
            let fkk = f * k * k;
            let hw = h * wd;
            let out_h = (h - 1) * stride + k - 2 * pad;
            let out_w = (wd - 1) * stride + k - 2 * pad;
            let dcols = kernels::im2col(gy, f, out_h, out_w, k, stride, pad);
            let (xv, wv) = (val(*x), val(*w));
            accum(nodes, grads, *x, || {
                let mut dx = vec![T::zero(); c * hw];
                T::gemm(c, fkk, hw, wv, fkk as isize, 1, &dcols, hw as isize, 1, T::zero(), &mut dx);
                dx
            });
            accum(nodes, grads, *w, || {
                let mut dw = vec![T::zero(); c * fkk];
                T::gemm(c, hw, fkk, xv, hw as isize, 1, &dcols, 1, hw as isize, T::zero(), &mut dw);
                dw
            });
            accum(nodes, grads, *b, || gy.chunks(out_h * out_w).map(|r| sum_slice(r)).collect());
        }
        Op::Resize { a, c, h, w, ys, xs } => {
            accum(nodes, grads, *a, || kernels::resize_backward(gy, *c, *h, *w, ys, xs));
        }
        Op::Sum(a) => {
            let n = nodes[*a].value.len();
            accum(nodes, grads, *a, || vec![gy[0]; n]);
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len();
            let g = gy[0] / T::from_usize(n).unwrap();
            accum(nodes, grads, *a, || vec![g; n]);
        }
        Op::FocalLoss { logits, target, gamma, eps } => {
            let z = val(*logits);
            let loss = node.value.data()[0];
            accum(nodes, grads, *logits, || {
                let terms = focal_terms(z, target, *gamma);
                let denom = terms.iter().fold(T::zero(), |s, t| s + t.weight) + *eps;
                terms
                    .iter()
                    .zip(target)
                    .map(|(t, &pos)| {
                        let du = (-t.weight * (*gamma * t.p * t.nll + (T::one() - t.p))
                            + loss * *gamma * t.weight * t.p)
                            / denom;
                        let dz = if pos { du } else { -du };
                        gy[0] * dz
                    })
                    .collect()
            });
        }
    }
}

fn sum_slice<T: Scalar>(s: &[T]) -> T {
    s.iter().fold(T::zero(), |a, &b| a + b)
}

fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Per-pixel quantities of the normalized focal loss.
struct FocalTerm<T> {
    /// Probability assigned to the true class.
    p: T,
    /// `-ln p`.
    nll: T,
    /// `(1 - p)^gamma`.
    weight: T,
}

fn focal_terms<T: Scalar>(z: &[T], target: &[bool], gamma: T) -> Vec<FocalTerm<T>> {
    z.iter()
        .zip(target)
        .map(|(&z, &pos)| {
            let u = if pos { z } else { -z };
            let p = kernels::sigmoid(u);
            let q = kernels::sigmoid(-u);
            FocalTerm { p, nll: kernels::softplus(-u), weight: q.powf(gamma) }
        })
        .collect()
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    /// Copies the value out of the graph.
    pub fn tensor(&self) -> Tensor<T> {
        (*self.value()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn shape2(&self) -> Result<(usize, usize)> {
        match self.shape().as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(dim_err(format!("expected a 2-D tensor, got {s:?}"))),
        }
    }

    fn emit(&self, value: Tensor<T>, parents: &[usize], op: Op<T>) -> Var<'g, T> {
        let rg = self.graph.requires(parents);
        self.graph.push(value, rg, op)
    }

    fn zip_with(
        self,
        other: Var<'g, T>,
        name: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'g, T>> {
        self.graph.check_same(self, other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(dim_err(format!("{name}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(a.shape(), data)?;
        Ok(self.emit(out, &[self.id, other.id], op))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.zip_with(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.zip_with(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.zip_with(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let c = T::from_f64_lossy(c);
        let out = self.value().map(|v| v * c);
        self.emit(out, &[self.id], Op::Scale(self.id, c))
    }

    /// Adds `bias` (shape `[n]`) to every length-`n` row along the last axis.
    pub fn add_bias(self, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        self.graph.check_same(self, bias)?;
        let (x, b) = (self.value(), bias.value());
        let n = *x.shape().last().unwrap();
        if b.shape() != [n] {
            return Err(dim_err(format!("add_bias: bias {:?} vs input {:?}", b.shape(), x.shape())));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v = *v + bb;
            }
        }
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.emit(out, &[self.id, bias.id], Op::AddBias { x: self.id, b: bias.id }))
    }

    /// Repeats a single-row `[1, n]` tensor into `[rows, n]`.
    pub fn broadcast_rows(self, rows: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let (r, n) = self.shape2()?;
        if r != 1 || rows == 0 {
            return Err(dim_err(format!("broadcast_rows needs [1, n], got {:?}", x.shape())));
        }
        let data = x.data().iter().copied().cycle().take(rows * n).collect();
        let out = Tensor::new(&[rows, n], data)?;
        Ok(self.emit(out, &[self.id], Op::BroadcastRows { x: self.id }))
    }

    /// `self [m×k] · other [k×n]`.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_impl(other, false)
    }

    /// `self [m×k] · otherᵀ` where `other` is `[n×k]`.
    pub fn matmul_bt(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'g, T>, bt: bool) -> Result<Var<'g, T>> {
        self.graph.check_same(self, other)?;
        let (a, b) = (self.value(), other.value());
        let mismatch =
            || dim_err(format!("matmul: incompatible shapes {:?} and {:?}", a.shape(), b.shape()));
        let (m, k) = self.shape2().map_err(|_| mismatch())?;
        let (br, bc) = other.shape2().map_err(|_| mismatch())?;
        let (kb, n) = if bt { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(mismatch());
        }
        let mut out = vec![T::zero(); m * n];
        if bt {
            T::gemm(m, k, n, a.data(), k as isize, 1, b.data(), 1, k as isize, T::zero(), &mut out);
        } else {
            T::gemm(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, T::zero(), &mut out);
        }
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.emit(out, &[self.id, other.id], Op::MatMul { a: self.id, b: other.id, m, k, n, bt }))
    }

    pub fn transpose(self) -> Result<Var<'g, T>> {
        let (rows, cols) = self.shape2()?;
        let out = Tensor::new(&[cols, rows], transpose(self.value().data(), rows, cols))?;
        Ok(self.emit(out, &[self.id], Op::Transpose { a: self.id, rows, cols }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let out = self.tensor().reshape(shape)?;
        Ok(self.emit(out, &[self.id], Op::Reshape(self.id)))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn narrow_cols(self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let (rows, cols) = self.shape2()?;
        if len == 0 || start + len > cols {
            return Err(dim_err(format!("narrow_cols {start}+{len} out of {cols} columns")));
        }
        let v = self.value();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::new(&[rows, len], data)?;
        Ok(self.emit(out, &[self.id], Op::NarrowCols { a: self.id, start, len, cols }))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(dim_err(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = x.data();
        let mut y = vec![T::zero(); xd.len()];
        if inner == 1 {
            for (src, dst) in xd.chunks_exact(n).zip(y.chunks_exact_mut(n)) {
                let mx = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v - mx;
                }
                T::exp_slice(dst);
                let s = dst.iter().fold(T::zero(), |s, &d| s + d);
                let inv = T::one() / s;
                for d in dst.iter_mut() {
                    *d = *d * inv;
                }
            }
        }
        for o in 0..if inner == 1 { 0 } else { outer } {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(xd[base + j * inner]);
                }
                let mut s = T::zero();
                for j in 0..n {
                    let e = (xd[base + j * inner] - mx).exp();
                    y[base + j * inner] = e;
                    s = s + e;
                }
                for j in 0..n {
                    y[base + j * inner] = y[base + j * inner] / s;
                }
            }
        }
        let out = Tensor::new(shape, y)?;
        Ok(self.emit(out, &[self.id], Op::Softmax { a: self.id, outer, n, inner }))
    }

    /// Normalizes each row along the last axis to zero mean and unit
    /// population variance, then applies `gamma` and `beta`.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        self.graph.check_same(gamma, beta)?;
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(dim_err(format!(
                "layer_norm: gamma {:?} / beta {:?} vs input {:?}",
                gv.shape(),
                bv.shape(),
                x.shape()
            )));
        }
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Validation(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let eps = T::from_f64_lossy(eps);
        let df = T::from_usize(d).unwrap();
        let rows = x.len() / d;
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = sum_slice(row) / df;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / df;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                y[r * d + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(x.shape(), y)?;
        let (gid, bid) = (gamma.id, beta.id);
        Ok(self.emit(
            out,
            &[self.id, gid, bid],
            Op::LayerNorm { x: self.id, gamma: gid, beta: bid, d, xhat, rstd },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'g, T> {
        let x = self.value();
        let out = Tensor::new(x.shape(), kernels::gelu_slice(x.data())).expect("same shape");
        self.emit(out, &[self.id], Op::Gelu(self.id))
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let out = self.value().map(kernels::sigmoid);
        self.emit(out, &[self.id], Op::Sigmoid(self.id))
    }

    /// Cross-correlation of a `C×H×W` input with `F×C×k×k` weights.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Var<'g, T>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g, T>> {
        self.graph.check_same(weight, bias)?;
        let (x, wv, bv) = (self.value(), weight.value(), bias.value());
        let (c, h, w) = chw(x.shape(), "conv2d input")?;
        let (f, wc, k) = match wv.shape() {
            &[f, wc, kh, kw] if kh == kw => (f, wc, kh),
            s => return Err(dim_err(format!("conv2d weight must be F×C×k×k, got {s:?}"))),
        };
        if wc != c || bv.shape() != [f] {
            return Err(dim_err(format!(
                "conv2d: input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Validation("conv2d stride must be >= 1".into()));
        }
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(dim_err(format!(
                "conv2d kernel {k} larger than padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let ho = kernels::conv_out(h, k, stride, pad);
        let wo = kernels::conv_out(w, k, stride, pad);
        let p = ho * wo;
        let ckk = c * k * k;
        let cols = kernels::im2col(x.data(), c, h, w, k, stride, pad);
        let mut y = vec![T::zero(); f * p];
        for (row, &b) in y.chunks_mut(p).zip(bv.data()) {
            row.fill(b);
        }
        T::gemm(f, ckk, p, wv.data(), ckk as isize, 1, &cols, p as isize, 1, T::one(), &mut y);
        let out = Tensor::new(&[f, ho, wo], y)?;
        let geom = ConvGeom { c, h, w, f, k, stride, pad };
        let parents = [self.id, weight.id, bias.id];
        let cols = if self.graph.requires(&[weight.id]) { cols } else { Vec::new() };
        Ok(self.emit(out, &parents, Op::Conv2d { x: self.id, w: weight.id, b: bias.id, geom, cols }))
    }

    /// Transposed convolution (no padding) with `C×F×k×k` weights; output
    /// extent is `(H-1)·stride + k`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'g, T>,
        bias: Var<'g, T>,
        stride: usize,
    ) -> Result<Var<'g, T>> {
        self.graph.check_same(weight, bias)?;
        let (x, wv, bv) = (self.value(), weight.value(), bias.value());
        let (c, h, w) = chw(x.shape(), "conv_transpose2d input")?;
        let (wc, f, k) = match wv.shape() {
            &[wc, f, kh, kw] if kh == kw => (wc, f, kh),
            s => return Err(dim_err(format!("conv_transpose2d weight must be C×F×k×k, got {s:?}"))),
        };
        if wc != c || bv.shape() != [f] || stride == 0 {
            return Err(dim_err(format!(
                "conv_transpose2d: input {:?}, weight {:?}, bias {:?}, stride {stride}",
                x.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let (oh, ow) = ((h - 1) * stride + k, (w - 1) * stride + k);
        let fkk = f * k * k;
        let hw = h * w;
        let mut cols = vec![T::zero(); fkk * hw];
        T::gemm(fkk, c, hw, wv.data(), 1, fkk as isize, x.data(), hw as isize, 1, T::zero(), &mut cols);
        let mut y = kernels::col2im(&cols, f, oh, ow, k, stride, 0);
        for (plane, &b) in y.chunks_mut(oh * ow).zip(bv.data()) {
            for v in plane {
                *v = *v + b;
            }
        }
        let out = Tensor::new(&[f, oh, ow], y)?;
        let geom = ConvGeom { c, h, w, f, k, stride, pad: 0 };
        Ok(self.emit(
            out,
            &[self.id, weight.id, bias.id],
            Op::ConvTranspose2d { x: self.id, w: weight.id, b: bias.id, geom },
        ))
    }

    /// Bilinear resize of a `C×H×W` tensor (align-corners = false).
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'g, T>> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Validation("resize target must be at least 1×1".into()));
        }
        let x = self.value();
        let (c, h, w) = chw(x.shape(), "resize input")?;
        if (h, w) == (out_h, out_w) {
            // Identity taps would reproduce the input exactly; skip the arithmetic.
            let out = (*x).clone();
            return Ok(self.emit(out, &[self.id], Op::Reshape(self.id)));
        }
        let ys = kernels::axis_taps::<T>(h, out_h);
        let xs = kernels::axis_taps::<T>(w, out_w);
        let y = kernels::resize_forward(x.data(), c, h, w, &ys, &xs);
        let out = Tensor::new(&[c, out_h, out_w], y)?;
        Ok(self.emit(out, &[self.id], Op::Resize { a: self.id, c, h, w, ys, xs }))
    }

    pub fn sum(self) -> Var<'g, T> {
        let s = sum_slice(self.value().data());
        self.emit(Tensor::scalar(s), &[self.id], Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g, T> {
        let v = self.value();
        let s = sum_slice(v.data()) / T::from_usize(v.len()).unwrap();
        self.emit(Tensor::scalar(s), &[self.id], Op::Mean(self.id))
    }

    /// Normalized focal loss of logits against a binary target:
    /// `-Σ w·ln p_t / (Σ w + eps)` with `w = (1 - p_t)^gamma`.
    pub fn normalized_focal_loss(self, target: &[bool], gamma: f64, eps: f64) -> Result<Var<'g, T>> {
        let z = self.value();
        if z.len() != target.len() {
            return Err(dim_err(format!(
                "focal loss: {} logits vs {} target pixels",
                z.len(),
                target.len()
            )));
        }
        if gamma < 0.0 {
            return Err(Error::Validation(format!("focal gamma must be >= 0, got {gamma}")));
        }
        let gamma = T::from_f64_lossy(gamma);
        let eps = T::from_f64_lossy(eps);
        let terms = focal_terms(z.data(), target, gamma);
        let (num, den) = terms
            .iter()
            .fold((T::zero(), T::zero()), |(a, w), t| (a + t.weight * t.nll, w + t.weight));
        let loss = num / (den + eps);
        Ok(self.emit(
            Tensor::scalar(loss),
            &[self.id],
            Op::FocalLoss { logits: self.id, target: target.to_vec(), gamma, eps },
        ))
    }
}

fn chw(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(dim_err(format!("{what} must be C×H×W, got {shape:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[5., 6.]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[17., 39.]);
    }

    #[test]
    fn matmul_identity() {
        let g = Graph::<f64>::new();
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let a = g.constant(t(&[2, 2], &[0.3, -2., 7., 1.5]));
        assert_eq!(i.matmul(a).unwrap().value().data(), a.value().data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] and [2, 3]"), "{msg}");
    }

    #[test]
    fn conv_identity_kernel() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[1, 4, 5], |i| i as f64 * 0.5));
        let w = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = x.conv2d(w, b, 1, 0).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn conv_all_ones() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 5, 5]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = x.conv2d(w, b, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 3, 3]);
        assert!(y.value().data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_patchify_shape() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, 16, 24]));
        let w = g.constant(Tensor::zeros(&[5, 3, 8, 8]));
        let b = g.constant(Tensor::zeros(&[5]));
        assert_eq!(x.conv2d(w, b, 8, 0).unwrap().shape(), vec![5, 2, 3]);
    }

    #[test]
    fn conv_kernel_too_large() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2]));
        let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(x.conv2d(w, b, 1, 0), Err(Error::Dimension(_))));
        assert!(x.conv2d(w, b, 1, 1).is_ok());
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0., 0.]));
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
        let x = g.constant(t(&[2], &[0., 3f64.ln()]));
        let y = x.softmax(0).unwrap().value();
        assert!((y.data()[0] - 0.25).abs() < 1e-12 && (y.data()[1] - 0.75).abs() < 1e-12);
        assert!(x.softmax(1).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let g = Graph::<f64>::new();
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        let y = g.constant(t(&[1, 2], &[1., 3.])).layer_norm(gamma, beta, 1e-12).unwrap();
        assert!((y.value().data()[0] + 1.0).abs() < 1e-9);
        assert!((y.value().data()[1] - 1.0).abs() < 1e-9);
        let y = g.constant(t(&[1, 2], &[4., 4.])).layer_norm(gamma, beta, 1e-5).unwrap();
        assert_eq!(y.value().data(), &[0., 0.]);
        assert!(g.constant(t(&[1, 2], &[4., 4.])).layer_norm(gamma, beta, 0.0).is_err());
    }

    #[test]
    fn gelu_values() {
        let g = Graph::<f64>::new();
        let y = g.constant(t(&[3], &[0., 10., 1.])).gelu().value();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-4);
        assert!((y.data()[2] - 0.8412).abs() < 1e-4);
    }

    #[test]
    fn backward_product_rule() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.leaf(Tensor::scalar(-2.0));
        let loss = x.mul(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[-2.0]);
        assert_eq!(grads.get(y).unwrap().data(), &[3.0]);
    }

    #[test]
    fn backward_sum_gives_ones_and_accumulates() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let loss = x.sum();
        assert!(g.backward(loss).unwrap().get(x).unwrap().data().iter().all(|&v| v == 1.0));

        // x used twice: d(sum(x + x))/dx = 2
        let loss = x.add(x).unwrap().sum();
        assert!(g.backward(loss).unwrap().get(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn constants_never_receive_gradients() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let loss = x.mul(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(!c.requires_grad());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn no_grad_graph_tracks_nothing() {
        let g = Graph::<f32>::no_grad();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = x.mul(x).unwrap();
        assert!(!y.requires_grad());
    }

    #[test]
    fn resize_same_size_is_identity() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64).sin()));
        assert_eq!(x.resize_bilinear(3, 4).unwrap().value().data(), x.value().data());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 3, 5], 2.5));
        for (oh, ow) in [(7, 2), (1, 1), (12, 20)] {
            let y = x.resize_bilinear(oh, ow).unwrap().value();
            assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        }
    }
}
