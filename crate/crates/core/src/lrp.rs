//! The LRP block: relevance propagation as a differentiable computation.
//!
//! [`build_heatmaps`] walks a captured forward pass backward and emits,
//! onto the same autodiff graph, the mirror network that propagates
//! per-class relevance from the logits to the input pixels. Weights are
//! shared with the classifier; bias parameters are value-shared but
//! gradient-blocked, so minimizing a heatmap loss cannot inflate biases to
//! absorb relevance.
//!
//! Every propagation follows the four-step scheme: recompute the layer
//! output `z` from the recorded input, stabilize (`z + sign(z)·ε`,
//! `sign(0) = +1`), divide the incoming relevance (`s = R/z`), apply the
//! transposed operator (`c`), and multiply by the recorded input
//! (`R' = x ⊙ c`). Batch normalization never propagates on its own: it is
//! fused into the operation that produced its input (`K' = K·γ/σ`,
//! `B' = β + γ(B−μ)/σ`), including across dense-block skip connections,
//! where each consumer's leading BN fuses with the producer and the
//! consumer relevance slices concatenate into one equivalent propagation.
//!
//! The batch and class axes run merged as `B·K` rows throughout the block
//! and are separated only in the returned [`HeatmapBatch`].

use crate::autodiff::{Graph, Indices, NodeId};
use crate::classifier::{ActivationRecord, Network, PlanStep, StepAux};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputRule {
    /// Bounded-input rule at the first affine layer.
    Zb,
    /// Plain ε rule everywhere.
    Epsilon,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrpConfig {
    /// Denominator stabilizer. The production default is 1e-2; zero is
    /// accepted for conservation analysis.
    pub epsilon: f64,
    pub input_rule: InputRule,
    /// Lowest admissible input value for the Z^B rule.
    pub input_low: f64,
    /// Highest admissible input value for the Z^B rule.
    pub input_high: f64,
}

impl Default for LrpConfig {
    fn default() -> Self {
        LrpConfig { epsilon: 1e-2, input_rule: InputRule::Zb, input_low: 0.0, input_high: 1.0 }
    }
}

impl LrpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::Config("lrp epsilon must be >= 0".into()));
        }
        if self.input_low >= self.input_high {
            return Err(Error::Config("lrp input bounds need low < high".into()));
        }
        Ok(())
    }
}

/// One relevance map per sample per class, shaped `(B, K, C, Y, X)`.
#[derive(Debug, Clone, Copy)]
pub struct HeatmapBatch {
    pub node: NodeId,
}

/// Per-channel batch-norm terms prepared for fusion: `ratio = γ/σ` plus
/// the raw `β` and `μ` needed for the equivalent bias.
#[derive(Debug, Clone, Copy)]
pub struct BnFuse {
    pub ratio: NodeId,
    pub beta: NodeId,
    pub mean: NodeId,
}

/// Equivalent affine parameters after merging batch normalization with an
/// adjacent convolution/linear/pooling operation.
#[derive(Debug, Clone, Copy)]
pub struct FusedAffine {
    pub kernel: NodeId,
    pub bias: NodeId,
}

/// `K' = K ⊙ γ/σ` (per output channel), `B' = β + γ(B−μ)/σ`.
pub fn fuse_bn_affine<S: Scalar>(
    graph: &mut Graph<S>,
    kernel: NodeId,
    bias: NodeId,
    bn: &BnFuse,
) -> Result<FusedAffine> {
    let k = graph.mul(kernel, bn.ratio)?;
    let shifted = graph.sub(bias, bn.mean)?;
    let scaled = graph.mul(bn.ratio, shifted)?;
    let b = graph.add(bn.beta, scaled)?;
    Ok(FusedAffine { kernel: k, bias: b })
}

/// Fuses batch normalization with a pooling layer by first expressing the
/// pool as its equivalent diagonal convolution (identity mapping for max
/// pooling, `1/(k·k)` for average, `1` for sum pooling).
pub fn fuse_bn_pool<S: Scalar>(
    graph: &mut Graph<S>,
    channels: usize,
    kernel: usize,
    scale: f64,
    bn: &BnFuse,
) -> Result<FusedAffine> {
    let eq = pool_equivalent_kernel::<S>(channels, kernel, scale);
    let k = graph.constant(eq);
    let zero_bias = graph.constant(Tensor::zeros(&[channels]));
    fuse_bn_affine(graph, k, zero_bias, bn)
}

/// Diagonal `(C, C, k, k)` kernel reproducing a pooling operation as a
/// convolution.
pub fn pool_equivalent_kernel<S: Scalar>(channels: usize, kernel: usize, scale: f64) -> Tensor<S> {
    let mut data = vec![S::zero(); channels * channels * kernel * kernel];
    let v = S::from_f64(scale);
    for c in 0..channels {
        for ky in 0..kernel {
            for kx in 0..kernel {
                data[((c * channels + c) * kernel + ky) * kernel + kx] = v;
            }
        }
    }
    Tensor::new(&[channels, channels, kernel, kernel], data).expect("kernel shape is consistent")
}

/// Elementwise sum of relevance contributions arriving at one producer
/// from its consumers.
pub fn gather_skip_relevance<S: Scalar>(graph: &mut Graph<S>, rels: &[NodeId]) -> Result<NodeId> {
    let Some((&first, rest)) = rels.split_first() else {
        return Err(Error::Config("gather_skip_relevance on empty consumer list".into()));
    };
    let mut acc = first;
    for &r in rest {
        if graph.value(r).shape() != graph.value(acc).shape() {
            return Err(Error::shape(
                "gather_skip_relevance",
                format!("{:?} vs {:?}", graph.value(r).shape(), graph.value(acc).shape()),
            ));
        }
        acc = graph.add(acc, r)?;
    }
    Ok(acc)
}

/// The affine operation a propagation step runs through.
#[derive(Debug, Clone, Copy)]
pub enum AffineRef {
    Conv { kernel: NodeId, bias: NodeId, stride: usize, pad: usize },
    Linear { weight: NodeId, bias: NodeId },
}

impl AffineRef {
    fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: NodeId, bias_override: Option<NodeId>) -> Result<NodeId> {
        match *self {
            AffineRef::Conv { kernel, bias, stride, pad } => {
                let b = bias_override.unwrap_or(bias);
                let blocked = g.stop_gradient(b);
                g.conv2d(x, kernel, Some(blocked), stride, pad)
            }
            AffineRef::Linear { weight, bias } => {
                let b = bias_override.unwrap_or(bias);
                let blocked = g.stop_gradient(b);
                g.linear(x, weight, Some(blocked))
            }
        }
    }

    fn forward_kernel<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        match *self {
            AffineRef::Conv { stride, pad, .. } => {
                let blocked = g.stop_gradient(bias);
                g.conv2d(x, kernel, Some(blocked), stride, pad)
            }
            AffineRef::Linear { .. } => {
                let blocked = g.stop_gradient(bias);
                g.linear(x, kernel, Some(blocked))
            }
        }
    }

    fn transposed<S: Scalar>(&self, g: &mut Graph<S>, s: NodeId, kernel: NodeId, x: NodeId) -> Result<NodeId> {
        match *self {
            AffineRef::Conv { stride, pad, .. } => {
                let xs = g.value(x).shape();
                let spatial = (xs[2], xs[3]);
                g.conv2d_transposed(s, kernel, stride, pad, spatial)
            }
            AffineRef::Linear { .. } => g.linear_transposed(s, kernel),
        }
    }
}

/// Four-step LRP-ε propagation through a convolution or linear layer with
/// shared weights and gradient-blocked bias: `z = layer(x)` (stabilized),
/// `s = R/z`, `c = transposedᵀ(s)`, `R' = x ⊙ c`.
pub fn relprop_affine<S: Scalar>(
    graph: &mut Graph<S>,
    cfg: &LrpConfig,
    affine: &AffineRef,
    x: NodeId,
    rel: NodeId,
) -> Result<NodeId> {
    let z = affine.forward(graph, x, None)?;
    if graph.value(z).shape() != graph.value(rel).shape() {
        return Err(Error::shape(
            "relprop_affine",
            format!("relevance {:?} vs layer output {:?}", graph.value(rel).shape(), graph.value(z).shape()),
        ));
    }
    let z = graph.stabilize(z, cfg.epsilon);
    let s = graph.div(rel, z)?;
    let kernel = match *affine {
        AffineRef::Conv { kernel, .. } => kernel,
        AffineRef::Linear { weight, .. } => weight,
    };
    let c = affine.transposed(graph, s, kernel, x)?;
    graph.mul(x, c)
}

/// Bounded-input (Z^B) propagation for the network's first affine layer:
/// `z = z_orig − l·z⁺ − h·z⁻` where `z±` are the forward passes of an
/// all-ones input through the positive/negative weight parts, and
/// `R = x ⊙ c_orig − l·c⁺ − h·c⁻` after the three transposed passes.
/// With `l = 0` the positive branch is skipped entirely.
pub fn relprop_zb<S: Scalar>(
    graph: &mut Graph<S>,
    cfg: &LrpConfig,
    affine: &AffineRef,
    kernel: NodeId,
    bias: NodeId,
    x: NodeId,
    rel: NodeId,
) -> Result<NodeId> {
    let (l, h) = (cfg.input_low, cfg.input_high);
    let neg = graph.mul_const(kernel, -1.0);
    let relu_neg = graph.relu(neg);
    let w_neg = graph.mul_const(relu_neg, -1.0);
    let w_pos = graph.relu(kernel);
    let bneg = graph.mul_const(bias, -1.0);
    let relu_bneg = graph.relu(bneg);
    let b_neg = graph.mul_const(relu_bneg, -1.0);
    let b_pos = graph.relu(bias);

    let ones = {
        let sh = graph.value(x).shape().to_vec();
        graph.constant(Tensor::full(&sh, S::one()))
    };
    let mut z = affine.forward_kernel(graph, x, kernel, bias)?;
    if graph.value(z).shape() != graph.value(rel).shape() {
        return Err(Error::shape(
            "relprop_zb",
            format!("relevance {:?} vs layer output {:?}", graph.value(rel).shape(), graph.value(z).shape()),
        ));
    }
    if l != 0.0 {
        let zp = affine.forward_kernel(graph, ones, w_pos, b_pos)?;
        let zp = graph.mul_const(zp, l);
        z = graph.sub(z, zp)?;
    }
    let zn = affine.forward_kernel(graph, ones, w_neg, b_neg)?;
    let zn = graph.mul_const(zn, h);
    z = graph.sub(z, zn)?;

    let z = graph.stabilize(z, cfg.epsilon);
    let s = graph.div(rel, z)?;
    let c_orig = affine.transposed(graph, s, kernel, x)?;
    let mut r = graph.mul(x, c_orig)?;
    if l != 0.0 {
        let cp = affine.transposed(graph, s, w_pos, x)?;
        let cp = graph.mul_const(cp, l);
        r = graph.sub(r, cp)?;
    }
    let cn = affine.transposed(graph, s, w_neg, x)?;
    let cn = graph.mul_const(cn, h);
    graph.sub(r, cn)
}

/// Winner-takes-all propagation through max pooling: `z` is the recorded
/// pool output, `c = unpool(R/z)`.
pub fn relprop_maxpool<S: Scalar>(
    graph: &mut Graph<S>,
    cfg: &LrpConfig,
    rel: NodeId,
    pool_out: NodeId,
    indices: &Indices,
    x: NodeId,
) -> Result<NodeId> {
    let z = graph.stabilize(pool_out, cfg.epsilon);
    let s = graph.div(rel, z)?;
    let c = graph.max_unpool2d(s, indices)?;
    graph.mul(x, c)
}

/// Propagation through the recorded sequence MaxPool → BN → ReLU: the BN
/// is fused as an identity convolution over the pool output, then a single
/// unpool routes the result back to the pool input.
pub fn relprop_maxpool_bn_relu<S: Scalar>(
    graph: &mut Graph<S>,
    cfg: &LrpConfig,
    rel: NodeId,
    pool_out: NodeId,
    indices: &Indices,
    x: NodeId,
    bn: &BnFuse,
) -> Result<NodeId> {
    let shifted = graph.mul(pool_out, bn.ratio)?;
    let bias = bn_equivalent_bias(graph, bn)?;
    let z = graph.add(shifted, bias)?;
    let z = graph.stabilize(z, cfg.epsilon);
    let s = graph.div(rel, z)?;
    let t = graph.mul(s, bn.ratio)?;
    let c = graph.max_unpool2d(t, indices)?;
    graph.mul(x, c)
}

/// `β − γμ/σ`, the equivalent bias of BN fused with a bias-free producer,
/// gradient-blocked like every bias on the relevance path.
fn bn_equivalent_bias<S: Scalar>(graph: &mut Graph<S>, bn: &BnFuse) -> Result<NodeId> {
    let shifted = graph.mul(bn.ratio, bn.mean)?;
    let b = graph.sub(bn.beta, shifted)?;
    Ok(graph.stop_gradient(b))
}

/// Propagation through average pooling, treated as its equivalent diagonal
/// convolution; `z` comes straight from the recorded pool output.
pub fn relprop_avgpool<S: Scalar>(
    graph: &mut Graph<S>,
    cfg: &LrpConfig,
    rel: NodeId,
    pool_out: NodeId,
    kernel: usize,
    stride: usize,
    x: NodeId,
) -> Result<NodeId> {
    relprop_window_pool(graph, cfg, rel, pool_out, kernel, stride, 1.0 / (kernel * kernel) as f64, x)
}

/// Propagation through sum pooling (equivalent kernel of ones).
pub fn relprop_sumpool<S: Scalar>(
    graph: &mut Graph<S>,
    cfg: &LrpConfig,
    rel: NodeId,
    pool_out: NodeId,
    kernel: usize,
    stride: usize,
    x: NodeId,
) -> Result<NodeId> {
    relprop_window_pool(graph, cfg, rel, pool_out, kernel, stride, 1.0, x)
}

fn relprop_window_pool<S: Scalar>(
    graph: &mut Graph<S>,
    cfg: &LrpConfig,
    rel: NodeId,
    pool_out: NodeId,
    kernel: usize,
    stride: usize,
    scale: f64,
    x: NodeId,
) -> Result<NodeId> {
    let z = graph.stabilize(pool_out, cfg.epsilon);
    let s = graph.div(rel, z)?;
    let channels = graph.value(x).shape()[1];
    let eq = pool_equivalent_kernel::<S>(channels, kernel, scale);
    let eqk = graph.constant(eq);
    let xs = graph.value(x).shape();
    let spatial = (xs[2], xs[3]);
    let c = graph.conv2d_transposed(s, eqk, stride, 0, spatial)?;
    graph.mul(x, c)
}

/// Relevance arriving at a step output, optionally still wearing the
/// consumer's leading batch normalization (to be fused into this step).
struct Entry {
    bn: Option<BnFuse>,
    rel: NodeId,
}

/// Builds the full mirror network for a captured forward pass and returns
/// differentiable per-class heatmaps of shape `(B, K, C, Y, X)`. Relevance
/// seeds are the logits with all but one class zeroed, one row per
/// `(sample, class)` pair.
pub fn build_heatmaps<S: Scalar>(
    graph: &mut Graph<S>,
    net: &Network<S>,
    record: &ActivationRecord<S>,
    logits: NodeId,
    cfg: &LrpConfig,
) -> Result<HeatmapBatch> {
    cfg.validate()?;
    let k = net.classes();
    let b = record.batch;
    let lsh = graph.value(logits).shape();
    if lsh != [b, k] {
        return Err(Error::shape(
            "build_heatmaps",
            format!("logits {:?} vs batch {} x {} classes", lsh, b, k),
        ));
    }
    let seeds = graph.class_seeds(logits)?;
    let plan = net.plan();
    let mut rel: Vec<Vec<Entry>> = (0..plan.len()).map(|_| Vec::new()).collect();
    rel[plan.len() - 1].push(Entry { bn: None, rel: seeds });

    for step in (1..plan.len()).rev() {
        let entries = std::mem::take(&mut rel[step]);
        if entries.is_empty() {
            continue;
        }
        let fail = |what: &str| -> Error {
            Error::Config(format!("relevance propagation at step {} ({}): {}", step, plan[step].describe(), what))
        };
        match &plan[step] {
            PlanStep::Input => unreachable!("input is never iterated"),
            PlanStep::Relu { src } | PlanStep::Dropout { src, .. } => {
                rel[*src].extend(entries);
            }
            PlanStep::Flatten { src } => {
                let target = graph.value(record.steps[*src].out).shape().to_vec();
                let mut reshaped = Vec::with_capacity(entries.len());
                for e in entries {
                    if e.bn.is_some() {
                        return Err(fail("batch norm cannot be fused across a flatten"));
                    }
                    let mut shape = target.clone();
                    shape[0] = graph.value(e.rel).shape()[0];
                    reshaped.push(Entry { bn: None, rel: graph.reshape(e.rel, &shape)? });
                }
                rel[*src].extend(reshaped);
            }
            PlanStep::BatchNorm { gamma, src, .. } => {
                let StepAux::Bn { mean, sigma } = &record.steps[step].aux else {
                    return Err(Error::Corrupt("batch norm step recorded without statistics".into()));
                };
                let ratio = graph.div(record.param_nodes[*gamma], *sigma)?;
                let beta_id = match &plan[step] {
                    PlanStep::BatchNorm { beta, .. } => record.param_nodes[*beta],
                    _ => unreachable!(),
                };
                let fuse = BnFuse { ratio, beta: beta_id, mean: *mean };
                for e in entries {
                    if e.bn.is_some() {
                        return Err(fail("stacked batch norms are not supported"));
                    }
                    rel[*src].push(Entry { bn: Some(fuse), rel: e.rel });
                }
            }
            PlanStep::Concat { srcs } => {
                for e in entries {
                    let mut from = 0usize;
                    for &part in srcs {
                        let width = graph.value(record.steps[part].out).shape()[1];
                        let rel_slice = graph.slice_channels(e.rel, from, from + width)?;
                        let bn_slice = match &e.bn {
                            None => None,
                            Some(bn) => Some(BnFuse {
                                ratio: slice_vec(graph, bn.ratio, from, from + width)?,
                                beta: slice_vec(graph, bn.beta, from, from + width)?,
                                mean: slice_vec(graph, bn.mean, from, from + width)?,
                            }),
                        };
                        rel[part].push(Entry { bn: bn_slice, rel: rel_slice });
                        from += width;
                    }
                }
            }
            PlanStep::Linear { weight, bias, src } => {
                let merged = merge_plain(graph, entries)?;
                let Some(rel_in) = merged.plain else {
                    return Err(fail("batch norm after a linear layer is not supported"));
                };
                if !merged.fused.is_empty() {
                    return Err(fail("batch norm after a linear layer is not supported"));
                }
                let x = repeat_for_classes(graph, record.steps[*src].out, k)?;
                let affine = AffineRef::Linear { weight: record.param_nodes[*weight], bias: record.param_nodes[*bias] };
                let r = if cfg.input_rule == InputRule::Zb && feeds_from_input(plan, *src) {
                    relprop_zb(graph, cfg, &affine, record.param_nodes[*weight], record.param_nodes[*bias], x, rel_in)?
                } else {
                    relprop_affine(graph, cfg, &affine, x, rel_in)?
                };
                rel[*src].push(Entry { bn: None, rel: r });
            }
            PlanStep::Conv { kernel, bias, stride, pad, src } => {
                let merged = merge_plain(graph, entries)?;
                let x = repeat_for_classes(graph, record.steps[*src].out, k)?;
                let affine = AffineRef::Conv {
                    kernel: record.param_nodes[*kernel],
                    bias: record.param_nodes[*bias],
                    stride: *stride,
                    pad: *pad,
                };
                let first = cfg.input_rule == InputRule::Zb && feeds_from_input(plan, *src);
                // Fuse each consumer's BN with this convolution and treat
                // the concatenation as one equivalent layer.
                let mut kernels = Vec::new();
                let mut biases = Vec::new();
                let mut rels = Vec::new();
                if let Some(plain) = merged.plain {
                    kernels.push(record.param_nodes[*kernel]);
                    biases.push(record.param_nodes[*bias]);
                    rels.push(plain);
                }
                for (bn, r) in &merged.fused {
                    let fused =
                        fuse_bn_affine(graph, record.param_nodes[*kernel], record.param_nodes[*bias], bn)?;
                    kernels.push(fused.kernel);
                    biases.push(fused.bias);
                    rels.push(*r);
                }
                let k_eq = if kernels.len() == 1 { kernels[0] } else { graph.concat_channels(&kernels)? };
                let b_eq = if biases.len() == 1 { biases[0] } else { concat_vecs(graph, &biases)? };
                let r_conc = if rels.len() == 1 { rels[0] } else { graph.concat_channels(&rels)? };
                let r = if first {
                    relprop_zb(graph, cfg, &affine, k_eq, b_eq, x, r_conc)?
                } else {
                    let z = affine.forward_kernel(graph, x, k_eq, b_eq)?;
                    if graph.value(z).shape() != graph.value(r_conc).shape() {
                        return Err(Error::shape(
                            "relprop_affine",
                            format!(
                                "relevance {:?} vs layer output {:?}",
                                graph.value(r_conc).shape(),
                                graph.value(z).shape()
                            ),
                        ));
                    }
                    let z = graph.stabilize(z, cfg.epsilon);
                    let s = graph.div(r_conc, z)?;
                    let c = affine.transposed(graph, s, k_eq, x)?;
                    graph.mul(x, c)?
                };
                rel[*src].push(Entry { bn: None, rel: r });
            }
            PlanStep::MaxPool { src, .. } => {
                let StepAux::Pool(indices) = &record.steps[step].aux else {
                    return Err(Error::Corrupt("max pool step recorded without indices".into()));
                };
                let indices = indices.repeat_rows(k);
                let x = repeat_for_classes(graph, record.steps[*src].out, k)?;
                let pool_out = repeat_for_classes(graph, record.steps[step].out, k)?;
                let merged = merge_plain(graph, entries)?;
                let mut parts = Vec::new();
                if let Some(plain) = merged.plain {
                    let z = graph.stabilize(pool_out, cfg.epsilon);
                    parts.push(graph.div(plain, z)?);
                }
                for (bn, r) in &merged.fused {
                    let shifted = graph.mul(pool_out, bn.ratio)?;
                    let bias = bn_equivalent_bias(graph, bn)?;
                    let z = graph.add(shifted, bias)?;
                    let z = graph.stabilize(z, cfg.epsilon);
                    let s = graph.div(*r, z)?;
                    parts.push(graph.mul(s, bn.ratio)?);
                }
                let t = gather_skip_relevance(graph, &parts)?;
                let c = graph.max_unpool2d(t, &indices)?;
                let r = graph.mul(x, c)?;
                rel[*src].push(Entry { bn: None, rel: r });
            }
            PlanStep::AvgPool { kernel, stride, src } => {
                let x = repeat_for_classes(graph, record.steps[*src].out, k)?;
                let pool_out = repeat_for_classes(graph, record.steps[step].out, k)?;
                let merged = merge_plain(graph, entries)?;
                let mut parts = Vec::new();
                if let Some(plain) = merged.plain {
                    let z = graph.stabilize(pool_out, cfg.epsilon);
                    parts.push(graph.div(plain, z)?);
                }
                for (bn, r) in &merged.fused {
                    let shifted = graph.mul(pool_out, bn.ratio)?;
                    let bias = bn_equivalent_bias(graph, bn)?;
                    let z = graph.add(shifted, bias)?;
                    let z = graph.stabilize(z, cfg.epsilon);
                    let s = graph.div(*r, z)?;
                    parts.push(graph.mul(s, bn.ratio)?);
                }
                let t = gather_skip_relevance(graph, &parts)?;
                let channels = graph.value(x).shape()[1];
                let eq = pool_equivalent_kernel::<S>(channels, *kernel, 1.0 / (*kernel * *kernel) as f64);
                let eqk = graph.constant(eq);
                let xs = graph.value(x).shape();
                let spatial = (xs[2], xs[3]);
                let c = graph.conv2d_transposed(t, eqk, *stride, 0, spatial)?;
                let r = graph.mul(x, c)?;
                rel[*src].push(Entry { bn: None, rel: r });
            }
        }
    }

    let input_entries = std::mem::take(&mut rel[0]);
    if input_entries.is_empty() {
        return Err(Error::Config("no relevance reached the network input".into()));
    }
    let mut plains = Vec::new();
    for e in input_entries {
        if e.bn.is_some() {
            return Err(Error::Config("batch norm directly on the input is not supported".into()));
        }
        plains.push(e.rel);
    }
    let r0 = gather_skip_relevance(graph, &plains)?;
    let sh = graph.value(r0).shape().to_vec();
    let node = graph.reshape(r0, &[b, k, sh[1], sh[2], sh[3]])?;
    Ok(HeatmapBatch { node })
}

struct MergedEntries {
    plain: Option<NodeId>,
    fused: Vec<(BnFuse, NodeId)>,
}

/// Sums the plain (no-BN) contributions per the skip-connection relevance
/// rule; BN-wearing contributions stay separate for fusion.
fn merge_plain<S: Scalar>(graph: &mut Graph<S>, entries: Vec<Entry>) -> Result<MergedEntries> {
    let mut plains = Vec::new();
    let mut fused = Vec::new();
    for e in entries {
        match e.bn {
            None => plains.push(e.rel),
            Some(bn) => fused.push((bn, e.rel)),
        }
    }
    let plain = if plains.is_empty() { None } else { Some(gather_skip_relevance(graph, &plains)?) };
    Ok(MergedEntries { plain, fused })
}

/// Recorded activations carry `B` rows; relevance runs as `B·K` rows.
fn repeat_for_classes<S: Scalar>(graph: &mut Graph<S>, x: NodeId, k: usize) -> Result<NodeId> {
    if k == 1 {
        Ok(x)
    } else {
        graph.repeat_rows(x, k)
    }
}

/// True when `src` is the network input, possibly through a flatten —
/// i.e. the consuming layer is the first affine one and Z^B applies.
fn feeds_from_input(plan: &[PlanStep], src: usize) -> bool {
    match plan[src] {
        PlanStep::Input => true,
        PlanStep::Flatten { src } => matches!(plan[src], PlanStep::Input),
        _ => false,
    }
}

fn slice_vec<S: Scalar>(graph: &mut Graph<S>, v: NodeId, from: usize, to: usize) -> Result<NodeId> {
    let n = graph.value(v).numel();
    let wide = graph.reshape(v, &[1, n])?;
    let sliced = graph.slice_channels(wide, from, to)?;
    graph.reshape(sliced, &[to - from])
}

fn concat_vecs<S: Scalar>(graph: &mut Graph<S>, vs: &[NodeId]) -> Result<NodeId> {
    let mut wides = Vec::with_capacity(vs.len());
    let mut total = 0usize;
    for &v in vs {
        let n = graph.value(v).numel();
        total += n;
        wides.push(graph.reshape(v, &[1, n])?);
    }
    let cat = graph.concat_channels(&wides)?;
    graph.reshape(cat, &[total])
}
