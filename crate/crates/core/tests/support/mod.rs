//! Shared helpers for the integration and acceptance suites.

#![allow(dead_code)]

pub mod oracle;

use isnet_core::autodiff::{Graph, NodeId};
use isnet_core::tensor::Tensor;

/// Central finite differences of a scalar-valued computation with respect
/// to every parameter tensor, compared against the analytic gradients.
///
/// `build` must construct the computation from freshly-inserted parameter
/// leaves and return the scalar output node. Returns the worst relative
/// error and the fraction of parameters within `tol`.
pub fn finite_difference_check(
    params: &[Tensor<f64>],
    h: f64,
    build: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
) -> FdReport {
    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| graph.leaf(p.clone(), true)).collect();
    let out = build(&mut graph, &ids);
    assert_eq!(graph.value(out).numel(), 1, "finite differences need a scalar output");
    let grads = graph.backward(out, Tensor::scalar(1.0)).expect("backward");

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|p| g.leaf(p.clone(), false)).collect();
        let out = build(&mut g, &ids);
        g.value(out).item()
    };

    let mut worst = 0.0f64;
    let mut ok = 0usize;
    let mut total = 0usize;
    let mut failures = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[pi], p.shape());
        for e in 0..p.numel() {
            let mut plus = params.to_vec();
            let mut minus = params.to_vec();
            plus[pi] = bump(p, e, h);
            minus[pi] = bump(p, e, -h);
            let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ana = analytic.data()[e];
            let denom = num.abs().max(ana.abs()).max(1e-8);
            let rel = (num - ana).abs() / denom;
            total += 1;
            worst = worst.max(rel);
            if rel < 1e-4 {
                ok += 1;
            } else if failures.len() < 5 {
                failures.push(format!("param {} elem {}: analytic {} vs numeric {}", pi, e, ana, num));
            }
        }
    }
    FdReport { worst, frac_ok: ok as f64 / total as f64, total, failures }
}

fn bump(t: &Tensor<f64>, elem: usize, h: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[elem] += h;
    Tensor::new(t.shape(), data).unwrap()
}

pub struct FdReport {
    pub worst: f64,
    pub frac_ok: f64,
    pub total: usize,
    pub failures: Vec<String>,
}

/// Inner product of two equally-shaped tensors.
pub fn inner(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}
