//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Operations evaluate eagerly as they are recorded, so a [`Graph`] is both
//! the tape and the forward pass: by the time the loss node exists, every
//! intermediate value is populated and checked finite. [`Graph::backward`]
//! then walks the tape in reverse and accumulates gradients.
//!
//! Broadcasting is limited to row vectors (1 x m), column vectors (n x 1)
//! and scalars (1 x 1) against full matrices.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::svd;
use crate::tensor::Tensor;

/// Additive stabilizer inside `log`: probabilities are logged everywhere in
/// the loss zoo, and `log(p + EPS)` keeps hard zeros differentiable.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    // The scalar is applied at construction; kept for graph debugging.
    #[allow(dead_code)]
    AddScalar(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Neg(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowSoftmax(NodeId),
    RowLogSoftmax(NodeId),
    DropoutMask { parent: NodeId, mask: Tensor },
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    SvdValues { parent: NodeId, u: Tensor, v: Tensor },
    NuclearNorm { parent: NodeId, uvt: Tensor },
    GradReverse { parent: NodeId, lambda: f64 },
    L2RowNorm(NodeId),
    Transpose(NodeId),
    SliceRows { parent: NodeId, start: usize },
    #[allow(dead_code)]
    Detach(NodeId),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add-scalar",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Neg(..) => "neg",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSoftmax(..) => "row-softmax",
            Op::RowLogSoftmax(..) => "row-log-softmax",
            Op::DropoutMask { .. } => "dropout-mask",
            Op::ConcatRows(..) => "concat-rows",
            Op::ConcatCols(..) => "concat-cols",
            Op::SvdValues { .. } => "svd-singular-values",
            Op::NuclearNorm { .. } => "nuclear-norm",
            Op::GradReverse { .. } => "grad-reverse",
            Op::L2RowNorm(..) => "l2-row-norm",
            Op::Transpose(..) => "transpose",
            Op::SliceRows { .. } => "slice-rows",
            Op::Detach(..) => "detach",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Eagerly evaluated computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

#[inline]
fn src_index(shape: (usize, usize), r: usize, c: usize) -> usize {
    let rr = if shape.0 == 1 { 0 } else { r };
    let cc = if shape.1 == 1 { 0 } else { c };
    rr * shape.1 + cc
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node. With eager recording this is the result of
    /// evaluating the sub-graph rooted at `id`.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated at `id` by the last [`Graph::backward`] call.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn label(&self, idx: usize) -> String {
        format!("node {idx} ({})", self.nodes[idx].op.kind())
    }

    /// Bind a tensor as a leaf. Parameters, data batches and constants all
    /// enter the graph this way.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite input tensor");
        self.nodes.push(Node { op: Op::Input, value });
        NodeId(self.nodes.len() - 1)
    }

    /// 1x1 constant.
    pub fn constant(&mut self, v: f64) -> NodeId {
        self.input(Tensor::scalar_value(v))
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            let idx = self.nodes.len();
            return Err(Error::numeric(
                format!("node {idx} ({})", op.kind()),
                "non-finite value in forward evaluation",
            ));
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn binary_forward(
        &mut self,
        a: NodeId,
        b: NodeId,
        kind: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let Some(shape) = broadcast_shape(ta.shape(), tb.shape()) else {
            return Err(Error::shape(
                format!("node {} ({kind})", self.nodes.len()),
                format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()),
            ));
        };
        let mut out = Tensor::zeros(shape.0, shape.1);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let x = ta.data()[src_index(ta.shape(), r, c)];
                let y = tb.data()[src_index(tb.shape(), r, c)];
                out.set(r, c, f(x, y));
            }
        }
        Ok(out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary_forward(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary_forward(a, b, "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary_forward(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary_forward(a, b, "div", |x, y| x / y)?;
        self.push(Op::Div(a, b), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::shape(
                format!("node {} (matmul)", self.nodes.len()),
                format!("{:?} . {:?}", ta.shape(), tb.shape()),
            ));
        }
        let v = ta.matmul(tb).expect("checked dims");
        self.push(Op::MatMul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar(a, s), v)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    /// Stabilized natural log: `ln(x + 1e-12)`.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| (x + LOG_EPS).ln());
        self.push(Op::Log(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(stable_sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| -x);
        self.push(Op::Neg(a), v)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar_value(self.value(a).data().iter().sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape(
                format!("node {} (mean)", self.nodes.len()),
                "mean of empty tensor",
            ));
        }
        let v = Tensor::scalar_value(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(Op::Mean(a), v)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows(), t.cols());
        for r in 0..t.rows() {
            let row = t.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (c, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                out.set(r, c, e);
                denom += e;
            }
            for c in 0..t.cols() {
                out.set(r, c, out.get(r, c) / denom);
            }
        }
        self.push(Op::RowSoftmax(a), out)
    }

    pub fn row_log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows(), t.cols());
        for r in 0..t.rows() {
            let row = t.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            for (c, &x) in row.iter().enumerate() {
                out.set(r, c, x - lse);
            }
        }
        self.push(Op::RowLogSoftmax(a), out)
    }

    /// Inverted dropout: Bernoulli keep mask scaled by 1/(1-p). Evaluation
    /// passes simply do not insert this node.
    pub fn dropout(&mut self, a: NodeId, p: f64, stream: &mut Stream) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Input(format!("dropout probability {p} outside [0,1)")));
        }
        let t = self.value(a);
        let keep = 1.0 - p;
        let mut mask = Tensor::zeros(t.rows(), t.cols());
        for i in 0..mask.len() {
            mask.data_mut()[i] = if stream.bernoulli(keep) { 1.0 / keep } else { 0.0 };
        }
        let mut v = t.clone();
        for (x, m) in v.data_mut().iter_mut().zip(mask.data()) {
            *x *= m;
        }
        self.push(Op::DropoutMask { parent: a, mask }, v)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::shape(
                format!("node {} (concat-rows)", self.nodes.len()),
                format!("{:?} over {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let v = Tensor::from_vec(ta.rows() + tb.rows(), ta.cols(), data).expect("checked dims");
        self.push(Op::ConcatRows(a, b), v)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::shape(
                format!("node {} (concat-cols)", self.nodes.len()),
                format!("{:?} beside {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = Tensor::zeros(ta.rows(), ta.cols() + tb.cols());
        for r in 0..ta.rows() {
            for c in 0..ta.cols() {
                out.set(r, c, ta.get(r, c));
            }
            for c in 0..tb.cols() {
                out.set(r, ta.cols() + c, tb.get(r, c));
            }
        }
        self.push(Op::ConcatCols(a, b), out)
    }

    /// Singular values of a matrix, descending, as a k x 1 column.
    /// d(sigma_i)/dA = u_i v_i^T at simple singular values; at degenerate
    /// ones the same expression is used as a subgradient.
    pub fn svd_values(&mut self, a: NodeId) -> Result<NodeId> {
        let d = svd::svd(self.value(a))?;
        let k = d.s.len();
        let v = Tensor::from_vec(k, 1, d.s.clone()).expect("k x 1");
        self.push(Op::SvdValues { parent: a, u: d.u, v: d.v }, v)
    }

    /// Sum of singular values; gradient is U V^T.
    pub fn nuclear_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let d = svd::svd(self.value(a))?;
        let total: f64 = d.s.iter().sum();
        let uvt = d.u.matmul(&d.v.transpose()).expect("thin factors");
        self.push(Op::NuclearNorm { parent: a, uvt }, Tensor::scalar_value(total))
    }

    /// Identity forward; backward multiplies the incoming gradient by
    /// `-lambda`.
    pub fn grad_reverse(&mut self, a: NodeId, lambda: f64) -> Result<NodeId> {
        if !(lambda > 0.0) {
            return Err(Error::Input(format!("grad-reverse lambda {lambda} must be positive")));
        }
        let v = self.value(a).clone();
        self.push(Op::GradReverse { parent: a, lambda }, v)
    }

    /// Per-row Euclidean norm as an n x 1 column.
    pub fn l2_row_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let mut v = Tensor::zeros(t.rows(), 1);
        for r in 0..t.rows() {
            v.set(r, 0, t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt());
        }
        self.push(Op::L2RowNorm(a), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.value(a);
        if start + len > t.rows() {
            return Err(Error::shape(
                format!("node {} (slice-rows)", self.nodes.len()),
                format!("rows {start}..{} of {:?}", start + len, t.shape()),
            ));
        }
        let mut out = Tensor::zeros(len, t.cols());
        for r in 0..len {
            for c in 0..t.cols() {
                out.set(r, c, t.get(start + r, c));
            }
        }
        self.push(Op::SliceRows { parent: a, start }, out)
    }

    /// Identity forward, no gradient flows back.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).clone();
        self.push(Op::Detach(a), v)
    }

    /// Reverse pass from a scalar loss. Gradients for every node that the
    /// loss depends on become available through [`Graph::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                self.label(loss.0),
                format!("backward requires a scalar loss, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar_value(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate_parents(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], id: NodeId, shape: (usize, usize), f: &mut dyn FnMut(&mut Tensor)| {
            let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
            f(slot);
        };
        let shape_of = |id: NodeId| self.nodes[id.0].value.shape();

        match &self.nodes[idx].op {
            Op::Input | Op::Detach(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let ga = g.matmul(&tb.transpose()).expect("matmul grad a");
                let gb = ta.transpose().matmul(g).expect("matmul grad b");
                add_to(grads, *a, ta.shape(), &mut |t| t.add_assign(&ga));
                add_to(grads, *b, tb.shape(), &mut |t| t.add_assign(&gb));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign_b = if matches!(self.nodes[idx].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (&p, sign) in [(a, 1.0), (b, sign_b)].iter().map(|&(p, s)| (p, s)) {
                    let ps = shape_of(p);
                    add_to(grads, p, ps, &mut |t| {
                        for r in 0..g.rows() {
                            for c in 0..g.cols() {
                                let i = src_index(ps, r, c);
                                t.data_mut()[i] += sign * g.get(r, c);
                            }
                        }
                    });
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(self.nodes[idx].op, Op::Div(..));
                let (sa, sb) = (shape_of(*a), shape_of(*b));
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                add_to(grads, *a, sa, &mut |t| {
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let y = tb.data()[src_index(sb, r, c)];
                            let d = if is_div { 1.0 / y } else { y };
                            t.data_mut()[src_index(sa, r, c)] += g.get(r, c) * d;
                        }
                    }
                });
                add_to(grads, *b, sb, &mut |t| {
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let x = ta.data()[src_index(sa, r, c)];
                            let y = tb.data()[src_index(sb, r, c)];
                            let d = if is_div { -x / (y * y) } else { x };
                            t.data_mut()[src_index(sb, r, c)] += g.get(r, c) * d;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                let (s, a) = (*s, *a);
                add_to(grads, a, g.shape(), &mut |t| {
                    for (o, &x) in t.data_mut().iter_mut().zip(g.data()) {
                        *o += s * x;
                    }
                });
            }
            Op::AddScalar(a, _) => {
                add_to(grads, *a, g.shape(), &mut |t| t.add_assign(g));
            }
            Op::Relu(a) => {
                let ta = &self.nodes[a.0].value;
                add_to(grads, *a, ta.shape(), &mut |t| {
                    for i in 0..t.len() {
                        if ta.data()[i] > 0.0 {
                            t.data_mut()[i] += g.data()[i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let out = &self.nodes[idx].value;
                add_to(grads, *a, out.shape(), &mut |t| {
                    for i in 0..t.len() {
                        t.data_mut()[i] += g.data()[i] * out.data()[i];
                    }
                });
            }
            Op::Log(a) => {
                let ta = &self.nodes[a.0].value;
                add_to(grads, *a, ta.shape(), &mut |t| {
                    for i in 0..t.len() {
                        t.data_mut()[i] += g.data()[i] / (ta.data()[i] + LOG_EPS);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = &self.nodes[idx].value;
                add_to(grads, *a, out.shape(), &mut |t| {
                    for i in 0..t.len() {
                        let s = out.data()[i];
                        t.data_mut()[i] += g.data()[i] * s * (1.0 - s);
                    }
                });
            }
            Op::Neg(a) => {
                add_to(grads, *a, g.shape(), &mut |t| {
                    for i in 0..t.len() {
                        t.data_mut()[i] -= g.data()[i];
                    }
                });
            }
            Op::Sum(a) => {
                let gs = g.scalar();
                add_to(grads, *a, shape_of(*a), &mut |t| {
                    for x in t.data_mut() {
                        *x += gs;
                    }
                });
            }
            Op::Mean(a) => {
                let ps = shape_of(*a);
                let gs = g.scalar() / (ps.0 * ps.1) as f64;
                add_to(grads, *a, ps, &mut |t| {
                    for x in t.data_mut() {
                        *x += gs;
                    }
                });
            }
            Op::RowSoftmax(a) => {
                let p = &self.nodes[idx].value;
                add_to(grads, *a, p.shape(), &mut |t| {
                    for r in 0..p.rows() {
                        let dot: f64 =
                            (0..p.cols()).map(|c| g.get(r, c) * p.get(r, c)).sum();
                        for c in 0..p.cols() {
                            let d = p.get(r, c) * (g.get(r, c) - dot);
                            t.data_mut()[r * p.cols() + c] += d;
                        }
                    }
                });
            }
            Op::RowLogSoftmax(a) => {
                let out = &self.nodes[idx].value;
                add_to(grads, *a, out.shape(), &mut |t| {
                    for r in 0..out.rows() {
                        let gsum: f64 = (0..out.cols()).map(|c| g.get(r, c)).sum();
                        for c in 0..out.cols() {
                            let p = out.get(r, c).exp();
                            t.data_mut()[r * out.cols() + c] += g.get(r, c) - p * gsum;
                        }
                    }
                });
            }
            Op::DropoutMask { parent, mask } => {
                add_to(grads, *parent, mask.shape(), &mut |t| {
                    for i in 0..t.len() {
                        t.data_mut()[i] += g.data()[i] * mask.data()[i];
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let ra = shape_of(*a).0;
                let cols = g.cols();
                add_to(grads, *a, shape_of(*a), &mut |t| {
                    for i in 0..t.len() {
                        t.data_mut()[i] += g.data()[i];
                    }
                });
                add_to(grads, *b, shape_of(*b), &mut |t| {
                    for i in 0..t.len() {
                        t.data_mut()[i] += g.data()[ra * cols + i];
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (sa, sb) = (shape_of(*a), shape_of(*b));
                add_to(grads, *a, sa, &mut |t| {
                    for r in 0..sa.0 {
                        for c in 0..sa.1 {
                            t.data_mut()[r * sa.1 + c] += g.get(r, c);
                        }
                    }
                });
                add_to(grads, *b, sb, &mut |t| {
                    for r in 0..sb.0 {
                        for c in 0..sb.1 {
                            t.data_mut()[r * sb.1 + c] += g.get(r, sa.1 + c);
                        }
                    }
                });
            }
            Op::SvdValues { parent, u, v } => {
                let ps = shape_of(*parent);
                add_to(grads, *parent, ps, &mut |t| {
                    for i in 0..g.len() {
                        let gs = g.data()[i];
                        if gs == 0.0 {
                            continue;
                        }
                        for r in 0..ps.0 {
                            for c in 0..ps.1 {
                                t.data_mut()[r * ps.1 + c] += gs * u.get(r, i) * v.get(c, i);
                            }
                        }
                    }
                });
            }
            Op::NuclearNorm { parent, uvt } => {
                let gs = g.scalar();
                add_to(grads, *parent, uvt.shape(), &mut |t| {
                    for i in 0..t.len() {
                        t.data_mut()[i] += gs * uvt.data()[i];
                    }
                });
            }
            Op::GradReverse { parent, lambda } => {
                let l = *lambda;
                add_to(grads, *parent, g.shape(), &mut |t| {
                    for i in 0..t.len() {
                        t.data_mut()[i] -= l * g.data()[i];
                    }
                });
            }
            Op::L2RowNorm(a) => {
                let ta = &self.nodes[a.0].value;
                let out = &self.nodes[idx].value;
                add_to(grads, *a, ta.shape(), &mut |t| {
                    for r in 0..ta.rows() {
                        let n = out.get(r, 0).max(1e-12);
                        let gr = g.get(r, 0);
                        for c in 0..ta.cols() {
                            t.data_mut()[r * ta.cols() + c] += gr * ta.get(r, c) / n;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                add_to(grads, *a, gt.shape(), &mut |t| t.add_assign(&gt));
            }
            Op::SliceRows { parent, start } => {
                let ps = shape_of(*parent);
                let s = *start;
                add_to(grads, *parent, ps, &mut |t| {
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            t.data_mut()[(s + r) * ps.1 + c] += g.get(r, c);
                        }
                    }
                });
            }
        }
    }
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
