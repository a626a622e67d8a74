//! Reverse-mode tape over dense tensors.
//!
//! A [`Graph`] records primitive operations in topological order during the
//! forward pass; [`Graph::backward`] walks the tape once in reverse and
//! accumulates gradients into every `requires_grad` leaf. Construction is
//! single-writer; a finished graph is read-only.

use super::real::{sigmoid, Real};
use super::tensor::{Shape, Tensor};
use crate::error::{EattsError, Result};

pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op<T: Real> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Scale(NodeId, T),
    AddConst(NodeId, T),
    /// Elementwise multiply by a single-element node, broadcast over x.
    MulScalarNode(NodeId, NodeId),
    /// Elementwise add of a single-element node, broadcast over x.
    AddScalarNode(NodeId, NodeId),
    Unary {
        x: NodeId,
        /// df(x_value, y_value) -> dy/dx
        df: fn(T, T) -> T,
    },
    SumAll(NodeId),
    RowSum(NodeId),
    BroadcastRowAdd(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    L2Normalize(NodeId),
}

struct Node<T: Real> {
    shape: Shape,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients keyed by node id. Leaves that require grad but are unreachable
/// from the loss hold exact zeros.
pub struct GradMap<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> GradMap<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Graph<T> {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Stages a tensor onto the tape as a leaf, copying its data.
    pub fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(
            t.shape().clone(),
            t.data().to_vec(),
            t.needs_grad(),
            Op::Leaf,
        )
    }

    /// Convenience: a non-differentiable constant leaf.
    pub fn constant(&mut self, shape: Shape, data: Vec<T>) -> Result<NodeId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn shape(&self, id: NodeId) -> &Shape {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> T {
        debug_assert!(self.nodes[id.0].shape.is_scalar());
        self.nodes[id.0].value[0]
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].value.clone())
            .expect("node value consistent with shape")
    }

    fn push(&mut self, shape: Shape, value: Vec<T>, requires_grad: bool, op: Op<T>) -> NodeId {
        debug_assert_eq!(shape.numel(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn same_shape(&self, ctx: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a).dims() != self.shape(b).dims() {
            return Err(EattsError::dim(ctx, self.shape(a).dims(), self.shape(b).dims()));
        }
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(self.shape(a).clone(), v, self.rg(a) || self.rg(b), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(self.shape(a).clone(), v, self.rg(a) || self.rg(b), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(self.shape(a).clone(), v, self.rg(a) || self.rg(b), Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("div", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(self.shape(a).clone(), v, self.rg(a) || self.rg(b), Op::Div(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.value(x).iter().map(|&t| t * c).collect();
        self.push(self.shape(x).clone(), v, self.rg(x), Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.value(x).iter().map(|&t| t + c).collect();
        self.push(self.shape(x).clone(), v, self.rg(x), Op::AddConst(x, c))
    }

    pub fn mul_scalar_node(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.shape(s).is_scalar() {
            return Err(EattsError::dim("mul_scalar_node", self.shape(s).dims(), &[1]));
        }
        let sv = self.scalar_value(s);
        let v = self.value(x).iter().map(|&t| t * sv).collect();
        Ok(self.push(
            self.shape(x).clone(),
            v,
            self.rg(x) || self.rg(s),
            Op::MulScalarNode(x, s),
        ))
    }

    pub fn add_scalar_node(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.shape(s).is_scalar() {
            return Err(EattsError::dim("add_scalar_node", self.shape(s).dims(), &[1]));
        }
        let sv = self.scalar_value(s);
        let v = self.value(x).iter().map(|&t| t + sv).collect();
        Ok(self.push(
            self.shape(x).clone(),
            v,
            self.rg(x) || self.rg(s),
            Op::AddScalarNode(x, s),
        ))
    }

    pub fn unary(&mut self, x: NodeId, f: fn(T) -> T, df: fn(T, T) -> T) -> NodeId {
        let v: Vec<T> = self.value(x).iter().map(|&t| f(t)).collect();
        self.push(self.shape(x).clone(), v, self.rg(x), Op::Unary { x, df })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, |_, y| y * (T::ONE - y))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, T::tanh, |_, y| T::ONE - y * y)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, T::exp, |_, y| y)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(x, T::ln, |x, _| T::ONE / x)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(x, T::sqrt, |_, y| T::ONE / (T::from_f64(2.0) * y))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(
            x,
            |x| if x > T::ZERO { x } else { T::ZERO },
            |x, _| if x > T::ZERO { T::ONE } else { T::ZERO },
        )
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.rank() != 2 || sb.rank() != 2 || sa.cols() != sb.rows() {
            return Err(EattsError::dim("matmul", sa.dims(), sb.dims()));
        }
        let (m, k, n) = (sa.rows(), sa.cols(), sb.cols());
        let mut out = vec![T::ZERO; m * n];
        matmul_nn(self.value(a), self.value(b), m, k, n, &mut out);
        Ok(self.push(
            Shape::matrix(m, n),
            out,
            self.rg(a) || self.rg(b),
            Op::MatMul(a, b),
        ))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.rank() != 2 {
            return Err(EattsError::dim("transpose", s.dims(), &[0, 0]));
        }
        let (m, n) = (s.rows(), s.cols());
        let xv = self.value(x);
        let mut v = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                v[j * m + i] = xv[i * n + j];
            }
        }
        Ok(self.push(Shape::matrix(n, m), v, self.rg(x), Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Shape) -> Result<NodeId> {
        if shape.numel() != self.shape(x).numel() {
            return Err(EattsError::dim("reshape", self.shape(x).dims(), shape.dims()));
        }
        Ok(self.push(shape, self.value(x).to_vec(), self.rg(x), Op::Reshape(x)))
    }

    // ── Reductions and broadcasts ───────────────────────────────────

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: T = self.value(x).iter().copied().sum();
        self.push(Shape::vector(1), vec![s], self.rg(x), Op::SumAll(x))
    }

    /// Row sums of a matrix: (m x n) -> [m].
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.rank() != 2 {
            return Err(EattsError::dim("row_sum", s.dims(), &[0, 0]));
        }
        let (m, n) = (s.rows(), s.cols());
        let xv = self.value(x);
        let v: Vec<T> = (0..m)
            .map(|i| xv[i * n..(i + 1) * n].iter().copied().sum())
            .collect();
        Ok(self.push(Shape::vector(m), v, self.rg(x), Op::RowSum(x)))
    }

    /// (m x n) + [n] bias added to every row.
    pub fn broadcast_row_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.rank() != 2 || sb.rank() != 1 || sx.cols() != sb.dims()[0] {
            return Err(EattsError::dim("broadcast_row_add", sx.dims(), sb.dims()));
        }
        let (m, n) = (sx.rows(), sx.cols());
        let (xv, bv) = (self.value(x), self.value(bias));
        let mut v = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                v.push(xv[i * n + j] + bv[j]);
            }
        }
        Ok(self.push(
            Shape::matrix(m, n),
            v,
            self.rg(x) || self.rg(bias),
            Op::BroadcastRowAdd(x, bias),
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.rank() != 2 || start + len > s.rows() {
            return Err(EattsError::dim("slice_rows", s.dims(), &[start, len]));
        }
        let n = s.cols();
        let v = self.value(x)[start * n..(start + len) * n].to_vec();
        Ok(self.push(
            Shape::matrix(len, n),
            v,
            self.rg(x),
            Op::SliceRows(x, start, len),
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if s.rank() != 2 || start + len > s.cols() {
            return Err(EattsError::dim("slice_cols", s.dims(), &[start, len]));
        }
        let (m, n) = (s.rows(), s.cols());
        let xv = self.value(x);
        let mut v = Vec::with_capacity(m * len);
        for i in 0..m {
            v.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        Ok(self.push(
            Shape::matrix(m, len),
            v,
            self.rg(x),
            Op::SliceCols(x, start, len),
        ))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(EattsError::EmptyInput("concat_rows of zero nodes".into()));
        }
        let n = self.shape(xs[0]).cols();
        let mut rows = 0;
        let mut v = Vec::new();
        let mut rg = false;
        for &x in xs {
            let s = self.shape(x);
            if s.rank() != 2 || s.cols() != n {
                return Err(EattsError::dim("concat_rows", s.dims(), &[0, n]));
            }
            rows += s.rows();
            v.extend_from_slice(self.value(x));
            rg |= self.rg(x);
        }
        Ok(self.push(Shape::matrix(rows, n), v, rg, Op::ConcatRows(xs.to_vec())))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(EattsError::EmptyInput("concat_cols of zero nodes".into()));
        }
        let m = self.shape(xs[0]).rows();
        let mut total_cols = 0;
        let mut rg = false;
        for &x in xs {
            let s = self.shape(x);
            if s.rank() != 2 || s.rows() != m {
                return Err(EattsError::dim("concat_cols", s.dims(), &[m, 0]));
            }
            total_cols += s.cols();
            rg |= self.rg(x);
        }
        let mut v = Vec::with_capacity(m * total_cols);
        for i in 0..m {
            for &x in xs {
                let n = self.shape(x).cols();
                v.extend_from_slice(&self.value(x)[i * n..(i + 1) * n]);
            }
        }
        Ok(self.push(
            Shape::matrix(m, total_cols),
            v,
            rg,
            Op::ConcatCols(xs.to_vec()),
        ))
    }

    // ── Normalization ───────────────────────────────────────────────

    /// L2-normalizes a rank-1 vector; rejects near-zero inputs.
    pub fn l2_normalize(&mut self, v: NodeId) -> Result<NodeId> {
        let s = self.shape(v);
        if s.rank() != 1 {
            return Err(EattsError::dim("l2_normalize", s.dims(), &[0]));
        }
        let xv = self.value(v);
        let norm = l2_norm(xv);
        if norm.to_f64() <= EPS_NORM {
            return Err(EattsError::Degenerate(format!(
                "l2_normalize: vector norm {} <= {EPS_NORM}",
                norm.to_f64()
            )));
        }
        let denom = norm + T::from_f64(EPS_NORM);
        let out: Vec<T> = xv.iter().map(|&x| x / denom).collect();
        Ok(self.push(s.clone(), out, self.rg(v), Op::L2Normalize(v)))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Visits each node exactly once in
    /// reverse recording order.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap<T>> {
        if !self.shape(loss).is_scalar() {
            return Err(EattsError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss).dims()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::ONE]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_inputs(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        // Unreachable requires_grad leaves get exact zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![T::ZERO; node.value.len()]);
            }
        }
        Ok(GradMap { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], id: NodeId, update: impl FnOnce(&mut [T])) {
        if !self.rg(id) {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![T::ZERO; self.nodes[id.0].value.len()]);
        }
        update(slot.as_mut().unwrap());
    }

    fn accumulate_inputs(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, T::ONE, g));
                self.acc(grads, *b, |d| axpy(d, T::ONE, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, T::ONE, g));
                self.acc(grads, *b, |d| axpy(d, -T::ONE, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / bv[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a).rows(), self.shape(*a).cols());
                let n = self.shape(*b).cols();
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA += dC * B^T, dB += A^T * dC
                self.acc(grads, *a, |d| matmul_nt(g, bv, m, n, k, d));
                self.acc(grads, *b, |d| matmul_tn(av, g, m, k, n, d));
            }
            Op::Transpose(x) => {
                let (m, n) = (self.shape(*x).rows(), self.shape(*x).cols());
                self.acc(grads, *x, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |d| axpy(d, T::ONE, g));
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(grads, *x, |d| axpy(d, c, g));
            }
            Op::AddConst(x, _) => {
                self.acc(grads, *x, |d| axpy(d, T::ONE, g));
            }
            Op::MulScalarNode(x, s) => {
                let sv = self.scalar_value(*s);
                let xv = self.value(*x);
                self.acc(grads, *x, |d| axpy(d, sv, g));
                self.acc(grads, *s, |d| {
                    let mut acc = T::ZERO;
                    for i in 0..g.len() {
                        acc += g[i] * xv[i];
                    }
                    d[0] += acc;
                });
            }
            Op::AddScalarNode(x, s) => {
                self.acc(grads, *x, |d| axpy(d, T::ONE, g));
                self.acc(grads, *s, |d| {
                    d[0] += g.iter().copied().sum();
                });
            }
            Op::Unary { x, df, .. } => {
                let xv = self.value(*x);
                let yv = &node.value;
                let df = *df;
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * df(xv[i], yv[i]);
                    }
                });
            }
            Op::SumAll(x) => {
                let gs = g[0];
                self.acc(grads, *x, |d| {
                    for v in d.iter_mut() {
                        *v += gs;
                    }
                });
            }
            Op::RowSum(x) => {
                let n = self.shape(*x).cols();
                self.acc(grads, *x, |d| {
                    for (i, &gi) in g.iter().enumerate() {
                        for v in d[i * n..(i + 1) * n].iter_mut() {
                            *v += gi;
                        }
                    }
                });
            }
            Op::BroadcastRowAdd(x, bias) => {
                let n = self.shape(*bias).dims()[0];
                self.acc(grads, *x, |d| axpy(d, T::ONE, g));
                self.acc(grads, *bias, |d| {
                    for (i, &gi) in g.iter().enumerate() {
                        d[i % n] += gi;
                    }
                });
            }
            Op::SliceRows(x, start, _len) => {
                let n = self.shape(*x).cols();
                let off = start * n;
                self.acc(grads, *x, |d| {
                    for (i, &gi) in g.iter().enumerate() {
                        d[off + i] += gi;
                    }
                });
            }
            Op::SliceCols(x, start, len) => {
                let n = self.shape(*x).cols();
                self.acc(grads, *x, |d| {
                    for (i, row) in g.chunks_exact(*len).enumerate() {
                        for (j, &gj) in row.iter().enumerate() {
                            d[i * n + start + j] += gj;
                        }
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let cnt = self.nodes[x.0].value.len();
                    let gs = &g[off..off + cnt];
                    self.acc(grads, x, |d| axpy(d, T::ONE, gs));
                    off += cnt;
                }
            }
            Op::ConcatCols(xs) => {
                let m = self.shape(xs[0]).rows();
                let total: usize = xs.iter().map(|&x| self.shape(x).cols()).sum();
                let mut col_off = 0;
                for &x in xs {
                    let n = self.shape(x).cols();
                    self.acc(grads, x, |d| {
                        for i in 0..m {
                            for j in 0..n {
                                d[i * n + j] += g[i * total + col_off + j];
                            }
                        }
                    });
                    col_off += n;
                }
            }
            Op::L2Normalize(x) => {
                // y = v / (|v| + eps); dv = (g - (g . y) * v / (|v| (|v|+eps))) / (|v|+eps)
                let xv = self.value(*x);
                let norm = l2_norm(xv);
                let denom = norm + T::from_f64(EPS_NORM);
                let yv = &node.value;
                let gdoty: T = g.iter().zip(yv.iter()).map(|(&gi, &yi)| gi * yi).sum();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += (g[i] - gdoty * xv[i] / norm) / denom;
                    }
                });
            }
        }
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy<T: Real>(dst: &mut [T], alpha: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d += alpha * s;
    }
}

pub(crate) fn l2_norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// out += a (m x k) * b (k x n). ikj loop order keeps the inner loop
/// contiguous for autovectorization.
pub(crate) fn matmul_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out += a (m x n) * b^T where b is (k x n): result (m x k). Row-by-row dot
/// products over contiguous slices.
pub(crate) fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let mut acc = T::ZERO;
            for (&x, &y) in arow.iter().zip(brow.iter()) {
                acc += x * y;
            }
            out[i * k + l] += acc;
        }
    }
}

/// out += a^T * b where a is (m x k), b is (m x n): result (k x n).
pub(crate) fn matmul_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(g: &mut Graph<f64>, rows: usize, cols: usize, data: &[f64]) -> NodeId {
        let t = Tensor::new(Shape::matrix(rows, cols), data.to_vec()).unwrap();
        g.leaf(&t)
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let i2 = mat(&mut g, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let a = mat(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let y = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_dot() {
        let mut g = Graph::<f64>::new();
        let a = mat(&mut g, 1, 2, &[1.0, 2.0]);
        let b = mat(&mut g, 2, 1, &[3.0, 4.0]);
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = mat(&mut g, 2, 3, &[0.0; 6]);
        let b = mat(&mut g, 2, 2, &[0.0; 4]);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn l2_normalize_345() {
        let mut g = Graph::<f64>::new();
        let v = g.leaf(&Tensor::from_vec(vec![3.0, 4.0]));
        let y = g.l2_normalize(v).unwrap();
        let out = g.value(y);
        assert!((out[0] - 0.6).abs() < 1e-9);
        assert!((out[1] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn l2_normalize_unit_vector_fixed_point() {
        let mut g = Graph::<f64>::new();
        let v = g.leaf(&Tensor::from_vec(vec![1.0, 0.0, 0.0]));
        let y = g.l2_normalize(v).unwrap();
        for (a, b) in g.value(y).iter().zip([1.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_normalize_rejects_zero() {
        let mut g = Graph::<f64>::new();
        let v = g.leaf(&Tensor::from_vec(vec![0.0, 0.0]));
        assert!(matches!(
            g.l2_normalize(v),
            Err(EattsError::Degenerate(_))
        ));
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let v = g.leaf(&Tensor::from_vec(vec![1.0, 2.0, 3.0]).requires_grad(true));
        let s = g.sum_all(v);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic_is_2v() {
        let mut g = Graph::<f64>::new();
        let v = g.leaf(&Tensor::from_vec(vec![1.0, -2.0, 0.5]).requires_grad(true));
        let sq = g.mul(v, v).unwrap();
        let s = g.sum_all(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let v = g.leaf(&Tensor::from_vec(vec![1.0, 2.0]).requires_grad(true));
        assert!(matches!(g.backward(v), Err(EattsError::Contract(_))));
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut g = Graph::<f64>::new();
        let used = g.leaf(&Tensor::from_vec(vec![2.0]).requires_grad(true));
        let unused = g.leaf(&Tensor::from_vec(vec![5.0, 5.0]).requires_grad(true));
        let s = g.sum_all(used);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &[0.0, 0.0]);
        assert_eq!(grads.get(used).unwrap(), &[1.0]);
    }

    #[test]
    fn forward_backward_deterministic() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let a = g.leaf(&Tensor::from_rows(2, 2, vec![0.1, 0.7, -0.3, 0.9]).unwrap().requires_grad(true));
            let b = g.leaf(&Tensor::from_rows(2, 2, vec![0.5, -0.2, 0.8, 0.4]).unwrap());
            let c = g.matmul(a, b).unwrap();
            let d = g.tanh(c);
            let s = g.sum_all(d);
            let grads = g.backward(s).unwrap();
            (g.value(s).to_vec(), grads.get(a).unwrap().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let mut g = Graph::<f64>::new();
        let a = mat(&mut g, 2, 4, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let left = g.slice_cols(a, 0, 2).unwrap();
        let right = g.slice_cols(a, 2, 2).unwrap();
        let back = g.concat_cols(&[left, right]).unwrap();
        assert_eq!(g.value(back), g.value(a));

        let top = g.slice_rows(a, 0, 1).unwrap();
        let bottom = g.slice_rows(a, 1, 1).unwrap();
        let back2 = g.concat_rows(&[top, bottom]).unwrap();
        assert_eq!(g.value(back2), g.value(a));
    }
}
