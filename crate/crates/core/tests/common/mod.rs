//! Shared helpers for integration tests: central finite differences and
//! random test matrices.

use udabench_core::autodiff::{Graph, NodeId};
use udabench_core::rng::Stream;
use udabench_core::tensor::Tensor;

pub const FD_H: f64 = 1e-5;

/// Central finite differences against the analytic gradient produced by
/// `Graph::backward`. `build` must rebuild the full loss graph from the
/// candidate input and return (input node, scalar loss node); everything
/// else it closes over must stay fixed across evaluations.
pub fn check_gradient(
    build: &dyn Fn(&mut Graph, &Tensor) -> (NodeId, NodeId),
    x0: &Tensor,
    tol: f64,
    what: &str,
) {
    let mut g = Graph::new();
    let (xid, loss) = build(&mut g, x0);
    assert!(g.value(loss).is_scalar(), "{what}: loss is not scalar");
    g.backward(loss).expect(what);
    let analytic = match g.grad(xid) {
        Some(t) => t.clone(),
        None => Tensor::zeros(x0.rows(), x0.cols()),
    };
    let eval = |x: &Tensor| -> f64 {
        let mut g = Graph::new();
        let (_, loss) = build(&mut g, x);
        g.value(loss).scalar()
    };
    for i in 0..x0.len() {
        let mut plus = x0.clone();
        plus.data_mut()[i] += FD_H;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= FD_H;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
        let got = analytic.data()[i];
        let denom = numeric.abs().max(got.abs()).max(1.0);
        assert!(
            (numeric - got).abs() / denom < tol,
            "{what}: entry {i} analytic {got} vs numeric {numeric}"
        );
    }
}

pub fn randn(stream: &mut Stream, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| stream.normal()).collect()).unwrap()
}

/// Random logits; softmax of these makes valid probability rows.
pub fn rand_logits(stream: &mut Stream, rows: usize, cols: usize) -> Tensor {
    randn(stream, rows, cols)
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let m = x.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for c in 0..x.cols() {
            let e = (x.get(r, c) - m).exp();
            out.set(r, c, e);
            s += e;
        }
        for c in 0..x.cols() {
            out.set(r, c, out.get(r, c) / s);
        }
    }
    out
}

pub fn random_labels(stream: &mut Stream, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| stream.below(classes)).collect()
}
