//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! reverse of the tape is a valid topological order for backpropagation.
//! Only the handful of operations needed by the recurrent models and the MMD
//! objectives are provided.

use std::collections::HashMap;

use super::matrix::{matmul_nt_acc, matmul_tn_acc, sq_dist, Matrix};
use super::params::{ParamStore, StoreId};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param { store: StoreId, index: usize },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { a: NodeId, scale: f64 },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    SliceCols { a: NodeId, start: usize },
    Sum(NodeId),
    SumSquares(NodeId),
    Mmd(Box<MmdSpec>),
}

#[derive(Debug)]
struct MmdSpec {
    xs: Vec<NodeId>,
    ys: Vec<NodeId>,
    sigma2: Vec<f64>,
}

struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every parameter it reached.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<(StoreId, usize), Matrix>,
}

impl Gradients {
    pub fn get(&self, store: StoreId, index: usize) -> Option<&Matrix> {
        self.by_param.get(&(store, index))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    // (store, index) -> node, so a parameter is loaded once per graph.
    params: HashMap<(StoreId, usize), NodeId>,
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Input, value, false)
    }

    /// Loads a parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, index: usize) -> NodeId {
        let key = (store.id(), index);
        if let Some(&id) = self.params.get(&key) {
            return id;
        }
        let id = self.push(
            Op::Param {
                store: store.id(),
                index,
            },
            store.value(index).clone(),
            true,
        );
        self.params.insert(key, id);
        id
    }

    /// Loads a parameter by name.
    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter {name}")))?;
        Ok(self.param(store, idx))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatMul(a, b), v, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Add(a, b), v, ng))
    }

    /// Adds a 1×n row to every row of an m×n node.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return shape_err(format!("add_row {:?} with {:?}", av.shape(), rv.shape()));
        }
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Op::AddRow(a, row), v, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Sub(a, b), v, ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Mul(a, b), v, ng))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(a);
        self.push(Op::Affine { a, scale }, v, ng)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.affine(a, s, 0.0)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(Op::Sigmoid(a), v, ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(Op::Tanh(a), v, ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(Op::Exp(a), v, ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        if start + len > self.value(a).cols() {
            return shape_err(format!(
                "slice columns {start}..{} of {:?}",
                start + len,
                self.value(a).shape()
            ));
        }
        let v = self.value(a).slice_cols(start, len);
        let ng = self.ng(a);
        Ok(self.push(Op::SliceCols { a, start }, v, ng))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        let ng = self.ng(a);
        self.push(Op::Sum(a), v, ng)
    }

    /// Mean of all entries, as a 1×1 node.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of squared entries, as a 1×1 node.
    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(a).sum_squares());
        let ng = self.ng(a);
        self.push(Op::SumSquares(a), v, ng)
    }

    /// Batched unbiased MMD² under RBF kernels.
    ///
    /// `xs[t]` and `ys[t]` are `B×h` nodes holding the `t`-th sample of every
    /// batch member; row `b` across all `xs` forms the first sample set of
    /// member `b`. `sigma2[b]` is the squared bandwidth for member `b` and is
    /// treated as a constant. Returns a `B×1` node of estimates.
    pub fn mmd2(&mut self, xs: &[NodeId], ys: &[NodeId], sigma2: &[f64]) -> Result<NodeId> {
        if xs.len() < 2 || ys.len() < 2 {
            return Err(Error::Parameter(format!(
                "MMD needs at least two samples per side, got {} and {}",
                xs.len(),
                ys.len()
            )));
        }
        let (b, h) = self.value(xs[0]).shape();
        for &id in xs.iter().chain(ys) {
            if self.value(id).shape() != (b, h) {
                return shape_err(format!(
                    "MMD sample node {:?}, expected {:?}",
                    self.value(id).shape(),
                    (b, h)
                ));
            }
        }
        if sigma2.len() != b {
            return shape_err(format!("{} bandwidths for batch of {b}", sigma2.len()));
        }
        if let Some(s) = sigma2.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Parameter(format!("bandwidth must be positive, got {s}")));
        }
        let mut out = Matrix::zeros(b, 1);
        for (bi, &s2) in sigma2.iter().enumerate() {
            let xr: Vec<&[f64]> = xs.iter().map(|&id| self.value(id).row(bi)).collect();
            let yr: Vec<&[f64]> = ys.iter().map(|&id| self.value(id).row(bi)).collect();
            out.set(bi, 0, mmd2_rows(&xr, &yr, s2));
        }
        let ng = xs.iter().chain(ys).any(|&id| self.ng(id));
        Ok(self.push(
            Op::Mmd(Box::new(MmdSpec {
                xs: xs.to_vec(),
                ys: ys.to_vec(),
                sigma2: sigma2.to_vec(),
            })),
            out,
            ng,
        ))
    }

    /// Backpropagates from a scalar node and collects parameter gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called on a node that was never recorded".into(),
            ));
        }
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return shape_err(format!("loss must be 1x1, got {:?}", lv.shape()));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite("loss value".into()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param { store, index } => {
                    out.by_param.insert((*store, *index), g);
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let bv = self.value(*b);
                        let mut ga = Matrix::zeros(self.value(*a).rows(), bv.rows());
                        matmul_nt_acc(&g, bv, &mut ga);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let av = self.value(*a);
                        let mut gb = Matrix::zeros(av.cols(), g.cols());
                        matmul_tn_acc(av, &g, &mut gb);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let mut gr = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (x, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                                *x += v;
                            }
                        }
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0));
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Affine { a, scale } => accumulate(&mut grads, *a, g.scale(*scale)),
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |x, s| x * s * (1.0 - s))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, t| x * (1.0 - t * t))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |x, e| x * e)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols { a, start } => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for ri in 0..r {
                        ga.row_mut(ri)[*start..*start + g.cols()].copy_from_slice(g.row(ri));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::SumSquares(a) => {
                    let s = 2.0 * g.get(0, 0);
                    accumulate(&mut grads, *a, self.value(*a).scale(s));
                }
                Op::Mmd(spec) => self.mmd_backward(spec, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn mmd_backward(&self, spec: &MmdSpec, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let (b, h) = self.value(spec.xs[0]).shape();
        let mut gx: Vec<Matrix> = spec.xs.iter().map(|_| Matrix::zeros(b, h)).collect();
        let mut gy: Vec<Matrix> = spec.ys.iter().map(|_| Matrix::zeros(b, h)).collect();
        for (bi, &s2) in spec.sigma2.iter().enumerate() {
            let up = g.get(bi, 0);
            if up == 0.0 {
                continue;
            }
            let xr: Vec<&[f64]> = spec.xs.iter().map(|&id| self.value(id).row(bi)).collect();
            let yr: Vec<&[f64]> = spec.ys.iter().map(|&id| self.value(id).row(bi)).collect();
            let (dx, dy) = mmd2_rows_grad(&xr, &yr, s2);
            for (gm, d) in gx.iter_mut().zip(&dx) {
                for (o, v) in gm.row_mut(bi).iter_mut().zip(d) {
                    *o += up * v;
                }
            }
            for (gm, d) in gy.iter_mut().zip(&dy) {
                for (o, v) in gm.row_mut(bi).iter_mut().zip(d) {
                    *o += up * v;
                }
            }
        }
        for (id, gm) in spec.xs.iter().zip(gx) {
            if self.ng(*id) {
                accumulate(grads, *id, gm);
            }
        }
        for (id, gm) in spec.ys.iter().zip(gy) {
            if self.ng(*id) {
                accumulate(grads, *id, gm);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unbiased MMD² between two sample lists under an RBF kernel.
pub(crate) fn mmd2_rows(x: &[&[f64]], y: &[&[f64]], sigma2: f64) -> f64 {
    let (m, n) = (x.len() as f64, y.len() as f64);
    let inv = -0.5 / sigma2;
    let mut kxx = 0.0;
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            kxx += (inv * sq_dist(x[i], x[j])).exp();
        }
    }
    let mut kyy = 0.0;
    for i in 0..y.len() {
        for j in i + 1..y.len() {
            kyy += (inv * sq_dist(y[i], y[j])).exp();
        }
    }
    let mut kxy = 0.0;
    for xi in x {
        for yj in y {
            kxy += (inv * sq_dist(xi, yj)).exp();
        }
    }
    2.0 * kxx / (m * (m - 1.0)) + 2.0 * kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n)
}

/// Gradient of [`mmd2_rows`] with respect to every sample.
fn mmd2_rows_grad(x: &[&[f64]], y: &[&[f64]], sigma2: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let h = x[0].len();
    let (m, n) = (x.len() as f64, y.len() as f64);
    let inv = -0.5 / sigma2;
    // d k(a,b) / d a = -k (a - b) / sigma2
    let cxx = 2.0 / (m * (m - 1.0));
    let cyy = 2.0 / (n * (n - 1.0));
    let cxy = -2.0 / (m * n);
    let mut gx = vec![vec![0.0; h]; x.len()];
    let mut gy = vec![vec![0.0; h]; y.len()];
    let pair = |a: &[f64], b: &[f64], coef: f64, ga: &mut [f64], gb: &mut [f64]| {
        let k = (inv * sq_dist(a, b)).exp();
        let s = -coef * k / sigma2;
        for d in 0..h {
            let diff = s * (a[d] - b[d]);
            ga[d] += diff;
            gb[d] -= diff;
        }
    };
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let (lo, hi) = gx.split_at_mut(j);
            pair(x[i], x[j], cxx, &mut lo[i], &mut hi[0]);
        }
    }
    for i in 0..y.len() {
        for j in i + 1..y.len() {
            let (lo, hi) = gy.split_at_mut(j);
            pair(y[i], y[j], cyy, &mut lo[i], &mut hi[0]);
        }
    }
    for i in 0..x.len() {
        for j in 0..y.len() {
            pair(x[i], y[j], cxy, &mut gx[i], &mut gy[j]);
        }
    }
    (gx, gy)
}
