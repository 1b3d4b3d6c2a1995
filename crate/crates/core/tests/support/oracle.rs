//! Direct-rule LRP reference implementation.
//!
//! Propagates relevance through a captured forward pass by literally
//! evaluating the redistribution fractions per edge —
//! `R_i += x_i · w_ij / (z_j + sign(z_j)ε) · R_j` — one sample and one
//! class at a time, with explicit nested loops. No transposed operators,
//! no batched class rows, no autodiff: an independent route to the same
//! heatmaps the mirror network computes.

use isnet_core::autodiff::Graph;
use isnet_core::classifier::{ActivationRecord, Network, PlanStep, StepAux};
use isnet_core::lrp::{InputRule, LrpConfig};
use isnet_core::tensor::Tensor;

/// Plain-value snapshot of one recorded step.
struct StepVal {
    /// Full-batch output value.
    out: Tensor<f64>,
    bn: Option<(Vec<f64>, Vec<f64>)>, // (mean, sigma)
    pool_idx: Option<(Vec<u32>, Vec<usize>)>, // (indices, out shape)
}

fn snapshot(graph: &Graph<f64>, record: &ActivationRecord<f64>) -> Vec<StepVal> {
    record
        .steps
        .iter()
        .map(|s| {
            let out = graph.value(s.out).clone();
            let (bn, pool_idx) = match &s.aux {
                StepAux::Bn { mean, sigma } => (
                    Some((
                        graph.value(*mean).data().to_vec(),
                        graph.value(*sigma).data().to_vec(),
                    )),
                    None,
                ),
                StepAux::Pool(idx) => {
                    (None, Some((idx.idx.as_ref().clone(), idx.out_shape.clone())))
                }
                _ => (None, None),
            };
            StepVal { out, bn, pool_idx }
        })
        .collect()
}

/// Row `b` of a `(B, ...)` tensor as a flat vector plus the row shape.
fn row(t: &Tensor<f64>, b: usize) -> (Vec<f64>, Vec<usize>) {
    let shape = t.shape()[1..].to_vec();
    let n: usize = shape.iter().product();
    (t.data()[b * n..(b + 1) * n].to_vec(), shape)
}

#[derive(Clone)]
struct Entry {
    /// (ratio, beta, mean) per channel when a consumer BN awaits fusion.
    bn: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    rel: Vec<f64>,
    shape: Vec<usize>,
}

fn stab(z: f64, eps: f64) -> f64 {
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

fn safe_div(r: f64, z: f64) -> f64 {
    if z == 0.0 {
        assert_eq!(r, 0.0, "oracle hit a nonzero relevance over a zero denominator");
        0.0
    } else {
        r / z
    }
}

/// One heatmap per (sample, class): `(B, K, C, Y, X)`.
pub fn oracle_heatmaps(
    net: &Network<f64>,
    graph: &Graph<f64>,
    record: &ActivationRecord<f64>,
    logits: &Tensor<f64>,
    cfg: &LrpConfig,
) -> Tensor<f64> {
    let steps = snapshot(graph, record);
    let plan = net.plan();
    let b_total = record.batch;
    let k_total = net.classes();
    let in_shape = steps[0].out.shape()[1..].to_vec();
    let per_map: usize = in_shape.iter().product();
    let mut out = vec![0.0f64; b_total * k_total * per_map];
    for b in 0..b_total {
        for k in 0..k_total {
            let map = oracle_single(net, plan, &steps, logits, b, k, cfg);
            out[(b * k_total + k) * per_map..(b * k_total + k + 1) * per_map].copy_from_slice(&map);
        }
    }
    let mut shape = vec![b_total, k_total];
    shape.extend_from_slice(&in_shape);
    Tensor::new(&shape, out).unwrap()
}

fn feeds_from_input(plan: &[PlanStep], src: usize) -> bool {
    match plan[src] {
        PlanStep::Input => true,
        PlanStep::Flatten { src } => matches!(plan[src], PlanStep::Input),
        _ => false,
    }
}

fn oracle_single(
    net: &Network<f64>,
    plan: &[PlanStep],
    steps: &[StepVal],
    logits: &Tensor<f64>,
    b: usize,
    class: usize,
    cfg: &LrpConfig,
) -> Vec<f64> {
    let mut rel: Vec<Vec<Entry>> = (0..plan.len()).map(|_| Vec::new()).collect();
    let k_total = logits.shape()[1];
    let mut seed = vec![0.0; k_total];
    seed[class] = logits.data()[b * k_total + class];
    rel[plan.len() - 1].push(Entry { bn: None, rel: seed, shape: vec![k_total] });

    for sid in (1..plan.len()).rev() {
        let entries = std::mem::take(&mut rel[sid]);
        if entries.is_empty() {
            continue;
        }
        match &plan[sid] {
            PlanStep::Input => unreachable!(),
            PlanStep::Relu { src } | PlanStep::Dropout { src, .. } => rel[*src].extend(entries),
            PlanStep::Flatten { src } => {
                let (_, shape) = row(&steps[*src].out, b);
                for mut e in entries {
                    assert!(e.bn.is_none());
                    e.shape = shape.clone();
                    rel[*src].push(e);
                }
            }
            PlanStep::BatchNorm { gamma, beta, src, .. } => {
                let (mean, sigma) = steps[sid].bn.as_ref().expect("bn stats recorded");
                let gamma: Vec<f64> = net.param(*gamma).data().to_vec();
                let beta: Vec<f64> = net.param(*beta).data().to_vec();
                let ratio: Vec<f64> = gamma.iter().zip(sigma).map(|(g, s)| g / s).collect();
                for e in entries {
                    assert!(e.bn.is_none(), "stacked batch norms");
                    rel[*src].push(Entry {
                        bn: Some((ratio.clone(), beta.clone(), mean.clone())),
                        rel: e.rel,
                        shape: e.shape,
                    });
                }
            }
            PlanStep::Concat { srcs } => {
                for e in entries {
                    let inner: usize = e.shape[1..].iter().product();
                    let mut from = 0usize;
                    for &part in srcs {
                        let width = steps[part].out.shape()[1];
                        let mut shape = e.shape.clone();
                        shape[0] = width;
                        let rel_slice = e.rel[from * inner..(from + width) * inner].to_vec();
                        let bn_slice = e.bn.as_ref().map(|(r, bt, m)| {
                            (
                                r[from..from + width].to_vec(),
                                bt[from..from + width].to_vec(),
                                m[from..from + width].to_vec(),
                            )
                        });
                        rel[part].push(Entry { bn: bn_slice, rel: rel_slice, shape });
                        from += width;
                    }
                }
            }
            PlanStep::Linear { weight, bias, src } => {
                let (x, xshape) = row(&steps[*src].out, b);
                let w = net.param(*weight);
                let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
                let bias = net.param(*bias).data();
                let mut acc = vec![0.0; n_in];
                let first = cfg.input_rule == InputRule::Zb && feeds_from_input(plan, *src);
                for e in entries {
                    assert!(e.bn.is_none(), "bn after linear unsupported");
                    if first {
                        // Bounded-input rule on the raw weights.
                        let (l, h) = (cfg.input_low, cfg.input_high);
                        for j in 0..n_out {
                            let mut z = bias[j];
                            let mut zneg = f64::min(0.0, bias[j]);
                            let mut zpos = f64::max(0.0, bias[j]);
                            for i in 0..n_in {
                                let wij = w.data()[i * n_out + j];
                                z += x[i] * wij;
                                zneg += f64::min(0.0, wij);
                                zpos += f64::max(0.0, wij);
                            }
                            let mut zb = z - h * zneg;
                            if l != 0.0 {
                                zb -= l * zpos;
                            }
                            let s = safe_div(e.rel[j], stab(zb, cfg.epsilon));
                            for i in 0..n_in {
                                let wij = w.data()[i * n_out + j];
                                let mut num = x[i] * wij - h * f64::min(0.0, wij);
                                if l != 0.0 {
                                    num -= l * f64::max(0.0, wij);
                                }
                                acc[i] += num * s;
                            }
                        }
                    } else {
                        for j in 0..n_out {
                            let mut z = bias[j];
                            for i in 0..n_in {
                                z += x[i] * w.data()[i * n_out + j];
                            }
                            let s = safe_div(e.rel[j], stab(z, cfg.epsilon));
                            for i in 0..n_in {
                                acc[i] += x[i] * w.data()[i * n_out + j] * s;
                            }
                        }
                    }
                }
                rel[*src].push(Entry { bn: None, rel: acc, shape: xshape });
            }
            PlanStep::Conv { kernel, bias, stride, pad, src } => {
                let (x, xshape) = row(&steps[*src].out, b);
                let kern = net.param(*kernel);
                let bias = net.param(*bias).data();
                let (c_in, c_out, kh, kw) =
                    (kern.shape()[0], kern.shape()[1], kern.shape()[2], kern.shape()[3]);
                let (ih, iw) = (xshape[1], xshape[2]);
                let first = cfg.input_rule == InputRule::Zb && feeds_from_input(plan, *src);
                let mut acc = vec![0.0; x.len()];
                for e in entries {
                    // Materialize the (possibly BN-fused) kernel and bias.
                    let mut kf = kern.data().to_vec();
                    let mut bf: Vec<f64> = bias.to_vec();
                    if let Some((ratio, beta, mean)) = &e.bn {
                        for ci in 0..c_in {
                            for co in 0..c_out {
                                for t in 0..kh * kw {
                                    kf[(ci * c_out + co) * kh * kw + t] *= ratio[co];
                                }
                            }
                        }
                        for co in 0..c_out {
                            bf[co] = beta[co] + ratio[co] * (bias[co] - mean[co]);
                        }
                    }
                    let (oh, ow) = (e.shape[1], e.shape[2]);
                    for co in 0..c_out {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                // z for this output neuron.
                                let mut z = bf[co];
                                let mut zneg = f64::min(0.0, bf[co]);
                                let mut zpos = f64::max(0.0, bf[co]);
                                for ci in 0..c_in {
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            let iy = (oy * stride + ky) as isize - *pad as isize;
                                            let ix = (ox * stride + kx) as isize - *pad as isize;
                                            let w = kf[((ci * c_out + co) * kh + ky) * kw + kx];
                                            if iy >= 0 && ix >= 0 && (iy as usize) < ih && (ix as usize) < iw {
                                                let xv = x[(ci * ih + iy as usize) * iw + ix as usize];
                                                z += xv * w;
                                                zneg += f64::min(0.0, w);
                                                zpos += f64::max(0.0, w);
                                            }
                                        }
                                    }
                                }
                                let z = if first {
                                    let mut zb = z - cfg.input_high * zneg;
                                    if cfg.input_low != 0.0 {
                                        zb -= cfg.input_low * zpos;
                                    }
                                    zb
                                } else {
                                    z
                                };
                                let s = safe_div(
                                    e.rel[(co * oh + oy) * ow + ox],
                                    stab(z, cfg.epsilon),
                                );
                                if s == 0.0 {
                                    continue;
                                }
                                for ci in 0..c_in {
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            let iy = (oy * stride + ky) as isize - *pad as isize;
                                            let ix = (ox * stride + kx) as isize - *pad as isize;
                                            if iy < 0 || ix < 0 || iy as usize >= ih || ix as usize >= iw {
                                                continue;
                                            }
                                            let idx = (ci * ih + iy as usize) * iw + ix as usize;
                                            let w = kf[((ci * c_out + co) * kh + ky) * kw + kx];
                                            let num = if first {
                                                let mut n = x[idx] * w - cfg.input_high * f64::min(0.0, w);
                                                if cfg.input_low != 0.0 {
                                                    n -= cfg.input_low * f64::max(0.0, w);
                                                }
                                                n
                                            } else {
                                                x[idx] * w
                                            };
                                            acc[idx] += num * s;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                rel[*src].push(Entry { bn: None, rel: acc, shape: xshape });
            }
            PlanStep::MaxPool { src, .. } => {
                let (x, xshape) = row(&steps[*src].out, b);
                let (pool_out, oshape) = row(&steps[sid].out, b);
                let (idx_all, full_oshape) = steps[sid].pool_idx.as_ref().expect("indices recorded");
                let per_row: usize = full_oshape[1..].iter().product();
                let idx = &idx_all[b * per_row..(b + 1) * per_row];
                let (c_n, oh, ow) = (oshape[0], oshape[1], oshape[2]);
                let (ih, iw) = (xshape[1], xshape[2]);
                let mut acc = vec![0.0; x.len()];
                for e in entries {
                    for c in 0..c_n {
                        for o in 0..oh * ow {
                            let z0 = pool_out[c * oh * ow + o];
                            let (z, gain) = match &e.bn {
                                None => (z0, 1.0),
                                Some((ratio, beta, mean)) => {
                                    (z0 * ratio[c] + beta[c] - ratio[c] * mean[c], ratio[c])
                                }
                            };
                            let s = safe_div(e.rel[c * oh * ow + o], stab(z, cfg.epsilon));
                            let winner = idx[c * oh * ow + o] as usize;
                            let (wy, wx) = (winner / iw, winner % iw);
                            acc[(c * ih + wy) * iw + wx] += x[(c * ih + wy) * iw + wx] * gain * s;
                        }
                    }
                }
                rel[*src].push(Entry { bn: None, rel: acc, shape: xshape });
            }
            PlanStep::AvgPool { kernel, stride, src } => {
                let (x, xshape) = row(&steps[*src].out, b);
                let (pool_out, oshape) = row(&steps[sid].out, b);
                let (c_n, oh, ow) = (oshape[0], oshape[1], oshape[2]);
                let (ih, iw) = (xshape[1], xshape[2]);
                let scale = 1.0 / (*kernel * *kernel) as f64;
                let mut acc = vec![0.0; x.len()];
                for e in entries {
                    for c in 0..c_n {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let z0 = pool_out[(c * oh + oy) * ow + ox];
                                let (z, gain) = match &e.bn {
                                    None => (z0, 1.0),
                                    Some((ratio, beta, mean)) => {
                                        (z0 * ratio[c] + beta[c] - ratio[c] * mean[c], ratio[c])
                                    }
                                };
                                let s = safe_div(e.rel[(c * oh + oy) * ow + ox], stab(z, cfg.epsilon));
                                for ky in 0..*kernel {
                                    for kx in 0..*kernel {
                                        let (iy, ix) = (oy * stride + ky, ox * stride + kx);
                                        let idx = (c * ih + iy) * iw + ix;
                                        acc[idx] += x[idx] * scale * gain * s;
                                    }
                                }
                            }
                        }
                    }
                }
                rel[*src].push(Entry { bn: None, rel: acc, shape: xshape });
            }
        }
    }

    let entries = std::mem::take(&mut rel[0]);
    assert!(!entries.is_empty(), "no relevance reached the input");
    let n: usize = entries[0].rel.len();
    let mut map = vec![0.0; n];
    for e in entries {
        assert!(e.bn.is_none());
        for (m, v) in map.iter_mut().zip(&e.rel) {
            *m += v;
        }
    }
    map
}
