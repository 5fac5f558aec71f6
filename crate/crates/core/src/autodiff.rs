//! Define-by-run reverse-mode differentiation over batched tensors.
//!
//! A [`Tape`] records every primitive in evaluation order, so node inputs
//! always precede the node. [`Tape::backward`] walks the nodes once in
//! reverse and returns a [`Gradients`] map indexed by [`Var`].
//!
//! Values are row-major 2-D tensors whose rows index the batch. Groups of
//! `g` consecutive columns hold small vectors (3-vectors for sphere points,
//! 4-vectors for quaternions, 9 entries for a column-major rotation).

use nalgebra::Matrix4;

use crate::error::{Error, Result};
use crate::so3;
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powi(Var, i32),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sin(Var),
    Cos(Var),
    Atan2(Var, Var),
    Softmax(Var),
    GroupSum(Var, usize),
    GroupNorm(Var, usize),
    Normalize(Var, usize),
    RepeatEach(Var, usize),
    Tile(Var, usize),
    BroadcastRows(Var),
    SliceCols(Var, usize),
    Concat(Vec<Var>),
    SumAll(Var),
    Cross3(Var, Var),
    MatToQuat(Var),
    QuatToMat(Var),
    MatVec(Var, Var, usize),
    LogAbsDet4(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every tape node that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when the loss does not
    /// depend on it.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self.value(a).zip_map(self.value(b), f);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    /// `(r×k)·(k×c)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// Adds a `1×c` bias to every row of `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1);
        assert_eq!(b.cols(), self.value(a).cols());
        let mut value = self.value(a).clone();
        let c = value.cols();
        for r in 0..value.rows() {
            for (x, bb) in value.row_mut(r).iter_mut().zip(b.data()) {
                *x += bb;
            }
        }
        debug_assert_eq!(c, b.cols());
        let ng = self.ng(a) || self.ng(bias);
        self.push(value, Op::AddRowBias(a, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn powi(&mut self, a: Var, p: i32) -> Var {
        self.unary(a, Op::Powi(a, p), |x| x.powi(p))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.powi(a, 2)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    /// Elementwise `atan2(y, x)`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Var {
        self.binary(y, x, Op::Atan2(y, x), f64::atan2)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Sums consecutive groups of `g` columns: `r×(g·k) → r×k`.
    pub fn group_sum(&mut self, a: Var, g: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.cols() % g, 0);
        let k = x.cols() / g;
        let mut value = Tensor::zeros(x.rows(), k);
        for r in 0..x.rows() {
            let src = x.row(r);
            for (j, out) in value.row_mut(r).iter_mut().enumerate() {
                *out = src[j * g..(j + 1) * g].iter().sum();
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::GroupSum(a, g), ng)
    }

    /// Sum of every column: `r×c → r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let g = self.value(a).cols();
        self.group_sum(a, g)
    }

    /// Euclidean norm of each group of `g` columns.
    ///
    /// At an exactly zero group the subgradient 0 is used; the flow relies
    /// on this to differentiate `x·h(‖x‖)` at `x = 0`.
    pub fn group_norm(&mut self, a: Var, g: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.cols() % g, 0);
        let k = x.cols() / g;
        let mut value = Tensor::zeros(x.rows(), k);
        for r in 0..x.rows() {
            let src = x.row(r);
            for (j, out) in value.row_mut(r).iter_mut().enumerate() {
                *out = src[j * g..(j + 1) * g].iter().map(|v| v * v).sum::<f64>().sqrt();
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::GroupNorm(a, g), ng)
    }

    /// Scales each group of `g` columns to unit norm.
    pub fn normalize(&mut self, a: Var, g: usize) -> Result<Var> {
        let x = self.value(a);
        assert_eq!(x.cols() % g, 0);
        let mut value = x.clone();
        for r in 0..x.rows() {
            for chunk in value.row_mut(r).chunks_mut(g) {
                let n = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(n >= 1e-12) {
                    return Err(Error::DegenerateInput {
                        op: "normalize",
                        norm: n,
                    });
                }
                chunk.iter_mut().for_each(|v| *v /= n);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(value, Op::Normalize(a, g), ng))
    }

    /// Repeats every entry `g` times: `r×k → r×(k·g)`.
    pub fn repeat_each(&mut self, a: Var, g: usize) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len() * g);
        for v in x.data() {
            for _ in 0..g {
                data.push(*v);
            }
        }
        let value = Tensor::from_vec(x.rows(), x.cols() * g, data);
        let ng = self.ng(a);
        self.push(value, Op::RepeatEach(a, g), ng)
    }

    /// Concatenates `k` copies of each row: `r×c → r×(c·k)`.
    pub fn tile(&mut self, a: Var, k: usize) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len() * k);
        for r in 0..x.rows() {
            for _ in 0..k {
                data.extend_from_slice(x.row(r));
            }
        }
        let value = Tensor::from_vec(x.rows(), x.cols() * k, data);
        let ng = self.ng(a);
        self.push(value, Op::Tile(a, k), ng)
    }

    /// Repeats a single row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), 1);
        let mut data = Vec::with_capacity(x.cols() * rows);
        for _ in 0..rows {
            data.extend_from_slice(x.data());
        }
        let value = Tensor::from_vec(rows, x.cols(), data);
        let ng = self.ng(a);
        self.push(value, Op::BroadcastRows(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols());
        let mut data = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let value = Tensor::from_vec(x.rows(), len, data);
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let t = self.value(*p);
                assert_eq!(t.rows(), rows);
                data.extend_from_slice(t.row(r));
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::from_vec(rows, cols, data), Op::Concat(parts.to_vec()), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise cross product of `r×3` tensors.
    pub fn cross3(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols(), 3);
        assert_eq!(x.shape(), y.shape());
        let mut value = Tensor::zeros(x.rows(), 3);
        for r in 0..x.rows() {
            let c = cross(x.row(r), y.row(r));
            value.row_mut(r).copy_from_slice(&c);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Cross3(a, b), ng)
    }

    /// Column-major rotations (`r×9`) to canonical quaternions (`r×4`).
    ///
    /// The extraction branch and canonical sign are chosen per row from the
    /// values; derivatives are those of the selected branch.
    pub fn mat_to_quat(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.cols(), 9);
        let mut value = Tensor::zeros(x.rows(), 4);
        for r in 0..x.rows() {
            let m = nalgebra::Matrix3::from_column_slice(x.row(r));
            let q = so3::matrix_to_quat_raw(&m);
            let s = so3::canonical_sign(&q);
            for (o, qi) in value.row_mut(r).iter_mut().zip(q) {
                *o = s * qi;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::MatToQuat(a), ng)
    }

    /// Quaternions (`r×4`, any nonzero norm) to column-major rotations.
    pub fn quat_to_mat(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.cols(), 4);
        let mut value = Tensor::zeros(x.rows(), 9);
        for r in 0..x.rows() {
            let q = x.row(r);
            let m = so3::quat_to_matrix_raw([q[0], q[1], q[2], q[3]]);
            value.row_mut(r).copy_from_slice(m.as_slice());
        }
        let ng = self.ng(a);
        self.push(value, Op::QuatToMat(a), ng)
    }

    /// Row-wise `W·x` with `W` stored row-major as `n²` columns; `W` may
    /// have one row (shared) or one row per batch row.
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (wt, xt) = (self.value(w), self.value(x));
        let n = xt.cols();
        assert_eq!(wt.cols(), n * n);
        assert!(wt.rows() == 1 || wt.rows() == xt.rows());
        let mut value = Tensor::zeros(xt.rows(), n);
        for r in 0..xt.rows() {
            let wr = wt.row(if wt.rows() == 1 { 0 } else { r });
            let xr = xt.row(r);
            for (i, out) in value.row_mut(r).iter_mut().enumerate() {
                *out = (0..n).map(|j| wr[i * n + j] * xr[j]).sum();
            }
        }
        let ng = self.ng(w) || self.ng(x);
        self.push(value, Op::MatVec(w, x, n), ng)
    }

    /// `log|det W|` per row of row-major 4×4 matrices (`r×16 → r×1`).
    pub fn log_abs_det4(&mut self, w: Var) -> Var {
        let wt = self.value(w);
        assert_eq!(wt.cols(), 16);
        let mut value = Tensor::zeros(wt.rows(), 1);
        for r in 0..wt.rows() {
            let m = Matrix4::from_row_slice(wt.row(r));
            value.set(r, 0, m.determinant().abs().ln());
        }
        let ng = self.ng(w);
        self.push(value, Op::LogAbsDet4(w), ng)
    }

    /// Reverse sweep from a scalar (1×1) node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    gemm(g, false, bv, true, &mut ga, 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(av, true, g, false, &mut gb, 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRowBias(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |gi, bi| gi * bi));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.zip_map(av, |gi, ai| gi * ai));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |gi, bi| gi / bi));
                }
                if self.ng(*b) {
                    // d(a/b)/db = −y/b
                    let t = g.zip_map(y, |gi, yi| -gi * yi);
                    self.accumulate(grads, *b, t.zip_map(bv, |ti, bi| ti / bi));
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|v| -v)),
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Powi(a, p) => {
                let p = *p;
                let av = self.value(*a);
                let pf = p as f64;
                self.accumulate(grads, *a, g.zip_map(av, |gi, x| gi * pf * x.powi(p - 1)));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(av, |gi, x| if x > 0.0 { gi } else { 0.0 }));
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |gi, yi| gi * yi)),
            Op::Log(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(av, |gi, x| gi / x));
            }
            Op::Sqrt(a) => self.accumulate(grads, *a, g.zip_map(y, |gi, yi| 0.5 * gi / yi)),
            Op::Sin(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(av, |gi, x| gi * x.cos()));
            }
            Op::Cos(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(av, |gi, x| -gi * x.sin()));
            }
            Op::Atan2(yv, xv) => {
                let (yy, xx) = (self.value(*yv), self.value(*xv));
                let r2 = xx.zip_map(yy, |x, y| x * x + y * y);
                if self.ng(*yv) {
                    let t = g.zip_map(xx, |gi, x| gi * x);
                    self.accumulate(grads, *yv, t.zip_map(&r2, |ti, r| ti / r));
                }
                if self.ng(*xv) {
                    let t = g.zip_map(yy, |gi, y| -gi * y);
                    self.accumulate(grads, *xv, t.zip_map(&r2, |ti, r| ti / r));
                }
            }
            Op::Softmax(a) => {
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yi), gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GroupSum(a, gsize) => {
                let gsize = *gsize;
                let mut data = Vec::with_capacity(g.len() * gsize);
                for v in g.data() {
                    for _ in 0..gsize {
                        data.push(*v);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols() * gsize, data));
            }
            Op::GroupNorm(a, gsize) => {
                let gsize = *gsize;
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let (xr, gr, nr) = (x.row(r), g.row(r), y.row(r));
                    for (j, o) in ga.row_mut(r).iter_mut().enumerate() {
                        let n = nr[j / gsize];
                        if n > 0.0 {
                            *o = gr[j / gsize] * xr[j] / n;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Normalize(a, gsize) => {
                let gsize = *gsize;
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let (xr, gr, yr) = (x.row(r), g.row(r), y.row(r));
                    for k in 0..x.cols() / gsize {
                        let s = k * gsize..(k + 1) * gsize;
                        let n = xr[s.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = yr[s.clone()].iter().zip(&gr[s.clone()]).map(|(a, b)| a * b).sum();
                        for j in s {
                            ga.row_mut(r)[j] = (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RepeatEach(a, gsize) => {
                let gsize = *gsize;
                let mut data = Vec::with_capacity(g.len() / gsize);
                for chunk in g.data().chunks(gsize) {
                    data.push(chunk.iter().sum());
                }
                self.accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols() / gsize, data));
            }
            Op::Tile(a, k) => {
                let c = g.cols() / k;
                let mut ga = Tensor::zeros(g.rows(), c);
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let out = ga.row_mut(r);
                    for t in 0..*k {
                        for (o, v) in out.iter_mut().zip(&gr[t * c..(t + 1) * c]) {
                            *o += v;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::BroadcastRows(a) => {
                let mut ga = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in ga.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                let len = g.cols();
                for r in 0..x.rows() {
                    ga.row_mut(r)[*start..*start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if self.ng(*p) {
                        let mut gp = Tensor::zeros(g.rows(), c);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        self.accumulate(grads, *p, gp);
                    }
                    offset += c;
                }
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(x.rows(), x.cols(), g.item()));
            }
            Op::Cross3(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(av.rows(), 3);
                let mut gb = Tensor::zeros(av.rows(), 3);
                for r in 0..av.rows() {
                    ga.row_mut(r).copy_from_slice(&cross(bv.row(r), g.row(r)));
                    gb.row_mut(r).copy_from_slice(&cross(g.row(r), av.row(r)));
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::MatToQuat(a) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows(), 9);
                for r in 0..x.rows() {
                    mat_to_quat_vjp(x.row(r), g.row(r), ga.row_mut(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::QuatToMat(a) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows(), 4);
                for r in 0..x.rows() {
                    quat_to_mat_vjp(x.row(r), g.row(r), ga.row_mut(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::MatVec(w, x, n) => {
                let n = *n;
                let (wt, xt) = (self.value(*w), self.value(*x));
                let shared = wt.rows() == 1;
                if self.ng(*x) {
                    let mut gx = Tensor::zeros(xt.rows(), n);
                    for r in 0..xt.rows() {
                        let wr = wt.row(if shared { 0 } else { r });
                        let gr = g.row(r);
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = (0..n).map(|i| wr[i * n + j] * gr[i]).sum();
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.ng(*w) {
                    let mut gw = Tensor::zeros(wt.rows(), n * n);
                    for r in 0..xt.rows() {
                        let (xr, gr) = (xt.row(r), g.row(r));
                        let out = gw.row_mut(if shared { 0 } else { r });
                        for i in 0..n {
                            for j in 0..n {
                                out[i * n + j] += gr[i] * xr[j];
                            }
                        }
                    }
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::LogAbsDet4(w) => {
                let wt = self.value(*w);
                let mut gw = Tensor::zeros(wt.rows(), 16);
                for r in 0..wt.rows() {
                    let m = Matrix4::from_row_slice(wt.row(r));
                    // ∂ log|det W| / ∂W = W⁻ᵀ
                    let inv_t = m.try_inverse().map(|i| i.transpose()).unwrap_or(Matrix4::from_element(f64::NAN));
                    let gi = g.get(r, 0);
                    for i in 0..4 {
                        for j in 0..4 {
                            gw.set(r, i * 4 + j, gi * inv_t[(i, j)]);
                        }
                    }
                }
                self.accumulate(grads, *w, gw);
            }
        }
    }
}

fn cross(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Column-major index of matrix entry (i, j).
const fn cm(i: usize, j: usize) -> usize {
    j * 3 + i
}

/// Per-branch layout: pivot coordinate, derivative of the pivot value with
/// respect to the three diagonal entries, and for the remaining coordinates
/// the `(index, sign)` pairs of the numerator `m[a] ± m[b]`.
struct BranchRule {
    pivot: usize,
    dpivot: [f64; 3],
    others: [(usize, (usize, f64), (usize, f64)); 3],
}

fn branch_rule(branch: so3::QuatBranch) -> BranchRule {
    use so3::QuatBranch::*;
    match branch {
        W => BranchRule {
            pivot: 0,
            dpivot: [1.0, 1.0, 1.0],
            others: [
                (1, (cm(2, 1), 1.0), (cm(1, 2), -1.0)),
                (2, (cm(0, 2), 1.0), (cm(2, 0), -1.0)),
                (3, (cm(1, 0), 1.0), (cm(0, 1), -1.0)),
            ],
        },
        X => BranchRule {
            pivot: 1,
            dpivot: [1.0, -1.0, -1.0],
            others: [
                (0, (cm(2, 1), 1.0), (cm(1, 2), -1.0)),
                (2, (cm(0, 1), 1.0), (cm(1, 0), 1.0)),
                (3, (cm(0, 2), 1.0), (cm(2, 0), 1.0)),
            ],
        },
        Y => BranchRule {
            pivot: 2,
            dpivot: [-1.0, 1.0, -1.0],
            others: [
                (0, (cm(0, 2), 1.0), (cm(2, 0), -1.0)),
                (1, (cm(0, 1), 1.0), (cm(1, 0), 1.0)),
                (3, (cm(1, 2), 1.0), (cm(2, 1), 1.0)),
            ],
        },
        Z => BranchRule {
            pivot: 3,
            dpivot: [-1.0, -1.0, 1.0],
            others: [
                (0, (cm(1, 0), 1.0), (cm(0, 1), -1.0)),
                (1, (cm(0, 2), 1.0), (cm(2, 0), 1.0)),
                (2, (cm(1, 2), 1.0), (cm(2, 1), 1.0)),
            ],
        },
    }
}

fn mat_to_quat_vjp(m: &[f64], g: &[f64], out: &mut [f64]) {
    let mat = nalgebra::Matrix3::from_column_slice(m);
    let (branch, pivot) = so3::quat_branch(&mat);
    let raw = so3::matrix_to_quat_raw(&mat);
    let sign = so3::canonical_sign(&raw);
    let rule = branch_rule(branch);
    let r = pivot.max(0.0).sqrt();
    let h = 0.5 / r;
    let dh_dp = -0.25 / (r * r * r);
    // Accumulated ∂loss/∂p through the pivot and through h.
    let mut g_p = sign * g[rule.pivot] * 0.25 / r;
    for &(k, (ia, sa), (ib, sb)) in &rule.others {
        let gk = sign * g[k];
        let numer = sa * m[ia] + sb * m[ib];
        out[ia] += gk * h * sa;
        out[ib] += gk * h * sb;
        g_p += gk * numer * dh_dp;
    }
    for (d, coef) in rule.dpivot.iter().enumerate() {
        out[cm(d, d)] += g_p * coef;
    }
}

fn quat_to_mat_vjp(q: &[f64], g: &[f64], out: &mut [f64]) {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let s = 2.0 / (w * w + x * x + y * y + z * z);
    let gm = |i: usize, j: usize| g[cm(i, j)];
    let p = [
        [-(y * y + z * z), x * y - z * w, x * z + y * w],
        [x * y + z * w, -(x * x + z * z), y * z - x * w],
        [x * z - y * w, y * z + x * w, -(x * x + y * y)],
    ];
    let mut gp = 0.0;
    for (i, row) in p.iter().enumerate() {
        for (j, pij) in row.iter().enumerate() {
            gp += gm(i, j) * pij;
        }
    }
    let gw = -z * gm(0, 1) + y * gm(0, 2) + z * gm(1, 0) - x * gm(1, 2) - y * gm(2, 0) + x * gm(2, 1);
    let gx = y * gm(0, 1) + z * gm(0, 2) + y * gm(1, 0) - 2.0 * x * gm(1, 1) - w * gm(1, 2)
        + z * gm(2, 0)
        + w * gm(2, 1)
        - 2.0 * x * gm(2, 2);
    let gy = -2.0 * y * gm(0, 0) + x * gm(0, 1) + w * gm(0, 2) + x * gm(1, 0) + z * gm(1, 2)
        - w * gm(2, 0)
        + z * gm(2, 1)
        - 2.0 * y * gm(2, 2);
    let gz = -2.0 * z * gm(0, 0) - w * gm(0, 1) + x * gm(0, 2) + w * gm(1, 0) - 2.0 * z * gm(1, 1)
        + y * gm(1, 2)
        + x * gm(2, 0)
        + y * gm(2, 1);
    let sq = s * s;
    out[0] = s * gw - sq * gp * w;
    out[1] = s * gx - sq * gp * x;
    out[2] = s * gy - sq * gp * y;
    out[3] = s * gz - sq * gp * z;
}
