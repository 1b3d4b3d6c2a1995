//! Heatmap loss and the combined training loss.
//!
//! The heatmap loss normalizes the heatmap tensor by the square root of
//! its global variance (plus a stabilizer), takes absolute values, zeroes
//! everything inside the segmentation masks, sums what is left per
//! `(sample, class)` map, squashes through `f(x) = x/(x+E)` and applies
//! cross-entropy against a zero target, `g = −log(1−f)`. All of it is
//! differentiable, and gradients reach only background pixels.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::lrp::HeatmapBatch;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Balance between classification and heatmap loss, in `[0, 1]`.
    pub p: f64,
    /// Slope hyperparameter E of the squashing function.
    pub e_slope: f64,
    /// Variance stabilizer (keeps `0/0 = 0` on all-zero heatmaps).
    pub e_stab: f64,
    /// Upper clamp on `f` before the logarithm.
    pub clamp_hi: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { p: 0.7, e_slope: 1.0, e_stab: 1e-4, clamp_hi: 1.0 - 1e-4 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config("loss balance P must lie in [0, 1]".into()));
        }
        if self.e_slope <= 0.0 {
            return Err(Error::Config("loss slope E must be > 0".into()));
        }
        if self.e_stab <= 0.0 {
            return Err(Error::Config("variance stabilizer must be > 0".into()));
        }
        if !(0.0 < self.clamp_hi && self.clamp_hi < 1.0) {
            return Err(Error::Config("clamp_hi must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// `H' = |H / sqrt(Var(H) + e)|` with one variance over the whole tensor.
pub fn normalize_abs<S: Scalar>(graph: &mut Graph<S>, h: NodeId, e_stab: f64) -> Result<NodeId> {
    let var = graph.variance_all(h);
    let shifted = graph.add_const(var, e_stab);
    let denom = graph.sqrt(shifted)?;
    let scaled = graph.div(h, denom)?;
    Ok(graph.abs(scaled))
}

/// Repeats `(B, Y, X)` masks over the class and channel axes to match a
/// heatmap batch `(B, K, C, Y, X)`.
pub fn expand_masks<S: Scalar>(masks: &Tensor<S>, k: usize, c: usize) -> Result<Tensor<S>> {
    let sh = masks.shape();
    if sh.len() != 3 {
        return Err(Error::shape("expand_masks", format!("want (B, Y, X), got {:?}", sh)));
    }
    let (b, y, x) = (sh[0], sh[1], sh[2]);
    let plane = y * x;
    let mut out = Vec::with_capacity(b * k * c * plane);
    for bi in 0..b {
        let m = &masks.data()[bi * plane..(bi + 1) * plane];
        for _ in 0..k * c {
            out.extend_from_slice(m);
        }
    }
    Tensor::new(&[b, k, c, y, x], out)
}

/// `uh'_{bk} = Σ_{c,y,x} (1−M) ⊙ H'`: total normalized relevance outside
/// the masks, one value per heatmap.
pub fn background_relevance<S: Scalar>(
    graph: &mut Graph<S>,
    h_prime: NodeId,
    masks: &Tensor<S>,
) -> Result<NodeId> {
    let hsh = graph.value(h_prime).shape().to_vec();
    if hsh.len() != 5 {
        return Err(Error::shape("background_relevance", format!("want (B,K,C,Y,X), got {:?}", hsh)));
    }
    if masks.shape() != hsh {
        return Err(Error::shape(
            "background_relevance",
            format!("masks {:?} vs heatmaps {:?}", masks.shape(), hsh),
        ));
    }
    let inverted = masks.map(|v| S::one() - v);
    let inv = graph.constant(inverted);
    let masked = graph.mul(h_prime, inv)?;
    graph.sum_dims(masked, &[2, 3, 4])
}

/// `f(x) = x / (x + E)`.
pub fn saturate<S: Scalar>(graph: &mut Graph<S>, uh: NodeId, e_slope: f64) -> Result<NodeId> {
    let denom = graph.add_const(uh, e_slope);
    graph.div(uh, denom)
}

/// Cross-entropy against a zero target: `g = −log(1 − f)`.
pub fn penalize<S: Scalar>(graph: &mut Graph<S>, f: NodeId) -> Result<NodeId> {
    let neg = graph.mul_const(f, -1.0);
    let one_minus = graph.add_const(neg, 1.0);
    let log = graph.log(one_minus)?;
    Ok(graph.mul_const(log, -1.0))
}

/// Full heatmap loss `L_H` (scalar node) for a heatmap batch against
/// per-sample binary masks of shape `(B, Y, X)`.
pub fn heatmap_loss<S: Scalar>(
    graph: &mut Graph<S>,
    heatmaps: HeatmapBatch,
    masks: &Tensor<S>,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let hsh = graph.value(heatmaps.node).shape().to_vec();
    if hsh.len() != 5 {
        return Err(Error::shape("heatmap_loss", format!("want (B,K,C,Y,X), got {:?}", hsh)));
    }
    let expanded = expand_masks(masks, hsh[1], hsh[2])?;
    let h_prime = normalize_abs(graph, heatmaps.node, cfg.e_stab)?;
    let uh = background_relevance(graph, h_prime, &expanded)?;
    let f = saturate(graph, uh, cfg.e_slope)?;
    let f = graph.clamp(f, 0.0, cfg.clamp_hi);
    let g = penalize(graph, f)?;
    Ok(graph.mean_all(g))
}

/// `L_IS = (1−P)·L_C + P·L_H`. At the extremes only the surviving term is
/// wired in, so the other one stays outside the backward pass.
pub fn combined_loss<S: Scalar>(
    graph: &mut Graph<S>,
    l_c: NodeId,
    l_h: NodeId,
    p: f64,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config("loss balance P must lie in [0, 1]".into()));
    }
    if p == 0.0 {
        return Ok(graph.mul_const(l_c, 1.0));
    }
    if p == 1.0 {
        return Ok(graph.mul_const(l_h, 1.0));
    }
    let c = graph.mul_const(l_c, 1.0 - p);
    let h = graph.mul_const(l_h, p);
    graph.add(c, h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatedSlope {
    pub e: f64,
    /// Set when the sampled mean was zero and the fallback value 1 was
    /// used instead.
    pub degenerate: bool,
}

/// Rule-of-thumb E: the mean background relevance of an untrained model
/// over a few batches, divided by `k ∈ [10, 100]`. Then `f(mean) =
/// k/(k+1)`, comfortably high but unsaturated at the start of training.
pub fn estimate_e(samples: &[f64], k: f64) -> Result<EstimatedSlope> {
    if samples.is_empty() {
        return Err(Error::Config("estimate_e needs at least one sample".into()));
    }
    if !(10.0..=100.0).contains(&k) {
        return Err(Error::Config("estimate_e divisor must lie in [10, 100]".into()));
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    if mean <= 0.0 {
        return Ok(EstimatedSlope { e: 1.0, degenerate: true });
    }
    Ok(EstimatedSlope { e: mean / k, degenerate: false })
}
