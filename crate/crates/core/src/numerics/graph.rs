//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates adjoints. Nodes built only from
//! inputs (no parameters upstream) are marked constant and skipped, so the same
//! tape doubles as the no-grad inference path.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{axpy, axpy4, dot, dot4};
use super::tensor::{Module, Tensor};
use crate::error::{arg_err, dim_err, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Square(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Reshape(Var),
    SumAll(Var),
    Gather { x: Var, idx: Vec<usize> },
    GroupAttention { k: Var, v: Var, group: usize, coeffs: Vec<f64> },
    WeightedSelect { w: Var, xs: Vec<Var> },
    StraightThrough { soft: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn out_shape_like(x: &Tensor, rows: usize, cols: usize) -> Vec<usize> {
    if x.shape().len() == 2 {
        vec![rows, cols]
    } else {
        vec![cols]
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant: never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "input")
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "leaf")
    }

    /// Binds every parameter of `m` as a differentiable leaf, in `parameters()` order.
    pub fn bind<M: Module + ?Sized>(&mut self, m: &M) -> Result<Vec<Var>> {
        m.parameters()
            .into_iter()
            .map(|p| self.leaf(p.value.clone()))
            .collect()
    }

    /// Binds every parameter of `m` as a constant (inference / target networks).
    pub fn bind_frozen<M: Module + ?Sized>(&mut self, m: &M) -> Result<Vec<Var>> {
        m.parameters()
            .into_iter()
            .map(|p| self.input(p.value.clone()))
            .collect()
    }

    /// Adds the gradients of `vars` (as produced by [`Graph::bind`]) into `m`.
    pub fn accumulate<M: Module + ?Sized>(&self, m: &mut M, vars: &[Var]) {
        for (p, v) in m.parameters_mut().into_iter().zip(vars) {
            if let Some(g) = self.grad(*v) {
                p.grad.add_assign(g);
            }
        }
    }

    /// Gradient of a leaf after [`Graph::backward`]; `None` when no path reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    // ---- forward ops -------------------------------------------------------

    /// `y = x Wᵀ + b` with `W` stored `[n_out, n_in]`; `x` is `[n_in]` or `[B, n_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if wt.shape().len() != 2 || xt.cols() != wt.cols() {
            return Err(dim_err("linear", xt.shape(), wt.shape()));
        }
        let (rows, n_in, n_out) = (xt.rows(), xt.cols(), wt.rows());
        let bias = match b {
            Some(b) => {
                let bt = self.value(b);
                if bt.len() != n_out {
                    return Err(dim_err("linear bias", wt.shape(), bt.shape()));
                }
                Some(bt.data())
            }
            None => None,
        };
        let mut out = vec![0.0; rows * n_out];
        let (xd, wd) = (xt.data(), wt.data());
        for r in 0..rows {
            let xr = &xd[r * n_in..(r + 1) * n_in];
            let or = &mut out[r * n_out..(r + 1) * n_out];
            let wrow = |o: usize| &wd[o * n_in..(o + 1) * n_in];
            let blocks = n_out - n_out % 4;
            for o in (0..blocks).step_by(4) {
                let d = dot4(xr, [wrow(o), wrow(o + 1), wrow(o + 2), wrow(o + 3)]);
                or[o..o + 4].copy_from_slice(&d);
            }
            for o in blocks..n_out {
                or[o] = dot(xr, wrow(o));
            }
            if let Some(bd) = bias {
                for (y, b) in or.iter_mut().zip(bd) {
                    *y += b;
                }
            }
        }
        let shape = out_shape_like(xt, rows, n_out);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, rg, "linear")
    }

    /// Plain matrix product `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.cols() != bt.rows() || bt.shape().len() != 2 {
            return Err(dim_err("matmul", at.shape(), bt.shape()));
        }
        let (m, k, n) = (at.rows(), at.cols(), bt.cols());
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (at.data(), bt.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(orow, ad[i * k + p], &bd[p * n..(p + 1) * n]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b }, rg, "matmul")
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(dim_err(name, at.shape(), bt.shape()));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(at.shape(), data)
    }

    fn map_op(&self, x: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let xt = self.value(x);
        Tensor::new(xt.shape(), xt.data().iter().map(|v| f(*v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg, "mul")
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.map_op(x, |v| scale * v + shift)?;
        let rg = self.rg(x);
        self.push(t, Op::Affine { x, scale }, rg, "affine")
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.map_op(x, |v| v * v)?;
        let rg = self.rg(x);
        self.push(t, Op::Square(x), rg, "square")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.map_op(x, sigmoid)?;
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.map_op(x, libm::tanh)?;
        let rg = self.rg(x);
        self.push(t, Op::Tanh(x), rg, "tanh")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.map_op(x, |v| if v > 0.0 { v } else { 0.0 })?;
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg, "relu")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.cols() == 0 {
            return Err(arg_err("softmax of an empty row"));
        }
        let mut out = xt.data().to_vec();
        for row in out.chunks_exact_mut(xt.cols()) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xt.shape(), out)?;
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg, "softmax")
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.cols() == 0 {
            return Err(arg_err("log_softmax of an empty row"));
        }
        let mut out = xt.data().to_vec();
        for row in out.chunks_exact_mut(xt.cols()) {
            log_softmax_in_place(row);
        }
        let t = Tensor::new(xt.shape(), out)?;
        let rg = self.rg(x);
        self.push(t, Op::LogSoftmax(x), rg, "log_softmax")
    }

    /// Column-wise concatenation of equal-height matrices.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| arg_err("concat of nothing"))?;
        let rows = self.value(*first).rows();
        let mut width = 0;
        for v in xs {
            let t = self.value(*v);
            if t.rows() != rows {
                return Err(dim_err("concat_cols", self.value(*first).shape(), t.shape()));
            }
            width += t.cols();
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for v in xs {
                out.extend_from_slice(self.value(*v).row(r));
            }
        }
        let shape = out_shape_like(self.value(*first), rows, width);
        let rg = xs.iter().any(|v| self.rg(*v));
        self.push(Tensor::new(&shape, out)?, Op::Concat(xs.to_vec()), rg, "concat")
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        if start + len > xt.cols() {
            return Err(dim_err("slice_cols", xt.shape(), &[start, len]));
        }
        let rows = xt.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xt.row(r)[start..start + len]);
        }
        let shape = out_shape_like(xt, rows, len);
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out)?, Op::Slice { x, start }, rg, "slice")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg, "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg, "sum")
    }

    /// Picks column `idx[r]` of each row `r`, giving `[rows, 1]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        if idx.len() != xt.rows() || idx.iter().any(|&i| i >= xt.cols()) {
            return Err(dim_err("gather", xt.shape(), &[idx.len()]));
        }
        let out = idx.iter().enumerate().map(|(r, &c)| xt.at(r, c)).collect();
        let rg = self.rg(x);
        self.push(
            Tensor::new(&[idx.len(), 1], out)?,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            rg,
            "gather",
        )
    }

    /// Scaled dot-product attention inside consecutive groups of `group` rows.
    ///
    /// Row `i` of a group attends over the other rows `j ≠ i` of the same group with
    /// weights `softmax_j(k_i · k_j / √d_k)` and returns `Σ_j a_ij v_j`. The same
    /// projection serves as query and key.
    pub fn group_attention(&mut self, k: Var, v: Var, group: usize) -> Result<Var> {
        let (kt, vt) = (self.value(k), self.value(v));
        if group < 2 {
            return Err(arg_err("attention needs at least two agents per group"));
        }
        if kt.rows() != vt.rows() || kt.rows() % group != 0 {
            return Err(dim_err("group_attention", kt.shape(), vt.shape()));
        }
        let (rows, dv) = (kt.rows(), vt.cols());
        let coeffs = attention_coefficients_grouped(kt, group);
        let mut out = vec![0.0; rows * dv];
        for base in (0..rows).step_by(group) {
            for i in 0..group {
                let orow = &mut out[(base + i) * dv..(base + i + 1) * dv];
                for j in 0..group {
                    if j != i {
                        axpy(orow, coeffs[(base + i) * group + j], vt.row(base + j));
                    }
                }
            }
        }
        let rg = self.rg(k) || self.rg(v);
        self.push(
            Tensor::new(&[rows, dv], out)?,
            Op::GroupAttention { k, v, group, coeffs },
            rg,
            "group_attention",
        )
    }

    /// `y[b] = Σ_i w[b, i] · xs[i][b]` for `w: [B, n]` and `n` inputs of shape `[B, D]`.
    pub fn weighted_select(&mut self, w: Var, xs: &[Var]) -> Result<Var> {
        let wt = self.value(w);
        if wt.cols() != xs.len() || xs.is_empty() {
            return Err(dim_err("weighted_select", wt.shape(), &[xs.len()]));
        }
        let shape = self.value(xs[0]).shape().to_vec();
        let (rows, d) = (self.value(xs[0]).rows(), self.value(xs[0]).cols());
        if wt.rows() != rows {
            return Err(dim_err("weighted_select", wt.shape(), &shape));
        }
        let mut out = vec![0.0; rows * d];
        for (i, x) in xs.iter().enumerate() {
            let xt = self.value(*x);
            if xt.shape() != shape.as_slice() {
                return Err(dim_err("weighted_select", &shape, xt.shape()));
            }
            for r in 0..rows {
                axpy(&mut out[r * d..(r + 1) * d], wt.at(r, i), xt.row(r));
            }
        }
        let rg = self.rg(w) || xs.iter().any(|v| self.rg(*v));
        self.push(
            Tensor::new(&shape, out)?,
            Op::WeightedSelect { w, xs: xs.to_vec() },
            rg,
            "weighted_select",
        )
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.value(soft).shape() {
            return Err(dim_err("straight_through", self.value(soft).shape(), hard.shape()));
        }
        let rg = self.rg(soft);
        self.push(hard, Op::StraightThrough { soft }, rg, "straight_through")
    }

    // ---- reverse pass ------------------------------------------------------

    /// Accumulates `∂loss/∂leaf` for every differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(arg_err("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            self.backprop_node(node, &gy, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        let mut send = |v: Var, g: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let gd = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (rows, n_in, n_out) = (xt.rows(), xt.cols(), wt.rows());
                if self.rg(*x) {
                    let mut dx = vec![0.0; rows * n_in];
                    let blocks = n_out - n_out % 4;
                    for r in 0..rows {
                        let dxr = &mut dx[r * n_in..(r + 1) * n_in];
                        let gr = &gd[r * n_out..(r + 1) * n_out];
                        for o in (0..blocks).step_by(4) {
                            let a = [gr[o], gr[o + 1], gr[o + 2], gr[o + 3]];
                            axpy4(dxr, a, [wt.row(o), wt.row(o + 1), wt.row(o + 2), wt.row(o + 3)]);
                        }
                        for o in blocks..n_out {
                            axpy(dxr, gr[o], wt.row(o));
                        }
                    }
                    send(*x, Tensor::new(xt.shape(), dx).expect("shape"));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; n_out * n_in];
                    let blocks = rows - rows % 4;
                    for o in 0..n_out {
                        let dwo = &mut dw[o * n_in..(o + 1) * n_in];
                        let g = |r: usize| gd[r * n_out + o];
                        for r in (0..blocks).step_by(4) {
                            let a = [g(r), g(r + 1), g(r + 2), g(r + 3)];
                            axpy4(dwo, a, [xt.row(r), xt.row(r + 1), xt.row(r + 2), xt.row(r + 3)]);
                        }
                        for r in blocks..rows {
                            axpy(dwo, g(r), xt.row(r));
                        }
                    }
                    send(*w, Tensor::new(wt.shape(), dw).expect("shape"));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; n_out];
                        for r in 0..rows {
                            for o in 0..n_out {
                                db[o] += gd[r * n_out + o];
                            }
                        }
                        send(*b, Tensor::new(self.value(*b).shape(), db).expect("shape"));
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.rows(), at.cols(), bt.cols());
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = dot(&gd[i * n..(i + 1) * n], bt.row(p));
                        }
                    }
                    send(*a, Tensor::new(at.shape(), da).expect("shape"));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            axpy(&mut db[p * n..(p + 1) * n], at.at(i, p), &gd[i * n..(i + 1) * n]);
                        }
                    }
                    send(*b, Tensor::new(bt.shape(), db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                send(*a, gy.clone());
                send(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                send(*a, gy.clone());
                send(*b, map(gy, |g| -g));
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    send(*a, zip(gy, bt, |g, v| g * v));
                }
                if self.rg(*b) {
                    send(*b, zip(gy, at, |g, v| g * v));
                }
            }
            Op::Affine { x, scale } => send(*x, map(gy, |g| g * scale)),
            Op::Square(x) => send(*x, zip(gy, self.value(*x), |g, v| 2.0 * v * g)),
            Op::Sigmoid(x) => send(*x, zip(gy, y, |g, s| g * s * (1.0 - s))),
            Op::Tanh(x) => send(*x, zip(gy, y, |g, t| g * (1.0 - t * t))),
            Op::Relu(x) => send(*x, zip(gy, y, |g, v| if v > 0.0 { g } else { 0.0 })),
            Op::Softmax(x) => {
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), &gd[r * c..(r + 1) * c]);
                    let s = dot(yr, gr);
                    for j in 0..c {
                        dx[r * c + j] = yr[j] * (gr[j] - s);
                    }
                }
                send(*x, Tensor::new(y.shape(), dx).expect("shape"));
            }
            Op::LogSoftmax(x) => {
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), &gd[r * c..(r + 1) * c]);
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        dx[r * c + j] = gr[j] - libm::exp(yr[j]) * s;
                    }
                }
                send(*x, Tensor::new(y.shape(), dx).expect("shape"));
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                let width = y.cols();
                for v in xs {
                    let xt = self.value(*v);
                    let w = xt.cols();
                    if self.rg(*v) {
                        let mut dx = Vec::with_capacity(xt.len());
                        for r in 0..y.rows() {
                            dx.extend_from_slice(&gd[r * width + offset..r * width + offset + w]);
                        }
                        send(*v, Tensor::new(xt.shape(), dx).expect("shape"));
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let xt = self.value(*x);
                let (c, len) = (xt.cols(), y.cols());
                let mut dx = vec![0.0; xt.len()];
                for r in 0..y.rows() {
                    dx[r * c + start..r * c + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                send(*x, Tensor::new(xt.shape(), dx).expect("shape"));
            }
            Op::Reshape(x) => send(*x, gy.reshaped(self.value(*x).shape()).expect("shape")),
            Op::SumAll(x) => send(*x, Tensor::filled(self.value(*x).shape(), gd[0])),
            Op::Gather { x, idx } => {
                let xt = self.value(*x);
                let mut dx = vec![0.0; xt.len()];
                for (r, &c) in idx.iter().enumerate() {
                    dx[r * xt.cols() + c] += gd[r];
                }
                send(*x, Tensor::new(xt.shape(), dx).expect("shape"));
            }
            Op::GroupAttention { k, v, group, coeffs } => {
                let (kt, vt) = (self.value(*k), self.value(*v));
                let (rows, dk, dv, n) = (kt.rows(), kt.cols(), vt.cols(), *group);
                let scale = 1.0 / libm::sqrt(dk as f64);
                let mut dkm = vec![0.0; rows * dk];
                let mut dvm = vec![0.0; rows * dv];
                let mut da = vec![0.0; n];
                for base in (0..rows).step_by(n) {
                    for i in 0..n {
                        let gi = &gd[(base + i) * dv..(base + i + 1) * dv];
                        let a = &coeffs[(base + i) * n..(base + i + 1) * n];
                        let mut mean = 0.0;
                        for j in 0..n {
                            if j == i {
                                continue;
                            }
                            da[j] = dot(gi, vt.row(base + j));
                            axpy(&mut dvm[(base + j) * dv..(base + j + 1) * dv], a[j], gi);
                            mean += a[j] * da[j];
                        }
                        for j in 0..n {
                            if j == i {
                                continue;
                            }
                            let ds = a[j] * (da[j] - mean) * scale;
                            axpy(&mut dkm[(base + i) * dk..(base + i + 1) * dk], ds, kt.row(base + j));
                            axpy(&mut dkm[(base + j) * dk..(base + j + 1) * dk], ds, kt.row(base + i));
                        }
                    }
                }
                if self.rg(*k) {
                    send(*k, Tensor::new(kt.shape(), dkm).expect("shape"));
                }
                if self.rg(*v) {
                    send(*v, Tensor::new(vt.shape(), dvm).expect("shape"));
                }
            }
            Op::WeightedSelect { w, xs } => {
                let wt = self.value(*w);
                let (rows, d) = (y.rows(), y.cols());
                if self.rg(*w) {
                    let mut dw = vec![0.0; wt.len()];
                    for (i, x) in xs.iter().enumerate() {
                        let xt = self.value(*x);
                        for r in 0..rows {
                            dw[r * xs.len() + i] = dot(&gd[r * d..(r + 1) * d], xt.row(r));
                        }
                    }
                    send(*w, Tensor::new(wt.shape(), dw).expect("shape"));
                }
                for (i, x) in xs.iter().enumerate() {
                    if self.rg(*x) {
                        let mut dx = vec![0.0; rows * d];
                        for r in 0..rows {
                            axpy(&mut dx[r * d..(r + 1) * d], wt.at(r, i), &gd[r * d..(r + 1) * d]);
                        }
                        send(*x, Tensor::new(y.shape(), dx).expect("shape"));
                    }
                }
            }
            Op::StraightThrough { soft } => send(*soft, gy.clone()),
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|v| f(*v)).collect()).expect("shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()).expect("shape")
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-v))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - m);
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| libm::exp(v - m)).sum();
    let lse = m + libm::log(s);
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Attention coefficients `[rows, group]` for consecutive groups of keys.
pub(crate) fn attention_coefficients_grouped(keys: &Tensor, group: usize) -> Vec<f64> {
    let (rows, dk) = (keys.rows(), keys.cols());
    let scale = 1.0 / libm::sqrt(dk as f64);
    let mut coeffs = vec![0.0; rows * group];
    let mut scores = vec![0.0; group];
    for base in (0..rows).step_by(group) {
        for i in 0..group {
            let mut m = f64::NEG_INFINITY;
            for j in 0..group {
                if j != i {
                    scores[j] = dot(keys.row(base + i), keys.row(base + j)) * scale;
                    m = m.max(scores[j]);
                }
            }
            let mut s = 0.0;
            for j in 0..group {
                if j != i {
                    scores[j] = libm::exp(scores[j] - m);
                    s += scores[j];
                }
            }
            let a = &mut coeffs[(base + i) * group..(base + i + 1) * group];
            for j in 0..group {
                a[j] = if j == i { 0.0 } else { scores[j] / s };
            }
        }
    }
    coeffs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_linear_has_input_as_weight_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![3.0, -1.0])).unwrap();
        let w = g.leaf(Tensor::matrix(2, 2, vec![0.5, 1.0, -2.0, 0.25]).unwrap()).unwrap();
        let y = g.linear(x, w, None).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[3.0, -1.0, 3.0, -1.0]);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0])).unwrap();
        let b = g.leaf(Tensor::vector(vec![2.0])).unwrap();
        let l = g.square(a).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[2.0]);
        assert!(g.grad(b).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let w = g.leaf(Tensor::zeros(&[2, 2])).unwrap();
        let err = g.linear(x, w, None).unwrap_err();
        assert_eq!(
            err,
            crate::Error::Dimension {
                op: "linear",
                left: vec![3],
                right: vec![2, 2]
            }
        );
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1e300])).unwrap();
        assert!(matches!(g.square(x), Err(crate::Error::NonFinite("square"))));
    }
}
