//! Training loop and evaluation: momentum SGD with global gradient
//! clipping on the combined loss, validation-selected checkpoints, and the
//! biased-vs-clean comparison.
//!
//! Weight decay is deliberately absent: an L2 penalty pushes the model
//! toward the all-zero-heatmap solution that satisfies the heatmap loss
//! while ignoring the classification task.

use crate::autodiff::Graph;
use crate::classifier::{Mode, Network, RunningStat, TaskKind};
use crate::error::{Error, Result};
use crate::loss::{self, LossConfig};
use crate::lrp::{self, LrpConfig};
use crate::metrics::{self, BinaryCounts, ConfusionMatrix, MetricsReport};
use crate::scalar::Scalar;
use crate::synth::Dataset;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// When set, estimate the loss slope E from a few untrained batches
    /// by dividing the mean background relevance by this value (10..100).
    pub auto_e_divisor: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            momentum: 0.99,
            grad_clip_norm: 1.0,
            batch_size: 10,
            epochs: 30,
            seed: 0,
            auto_e_divisor: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(Error::Config("grad_clip_norm must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss_c: f64,
    pub loss_h: f64,
    pub loss_is: f64,
    pub grad_norm: f64,
}

#[derive(Debug)]
pub struct TrainOutcome<S> {
    /// Checkpoint with the best validation macro-F1.
    pub best: Network<S>,
    pub last: Network<S>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    /// Slope E actually used (estimated or configured).
    pub e_used: f64,
    pub log: Vec<LogRow>,
    pub val_history: Vec<(usize, Option<f64>)>,
    /// Set when training stopped early on a non-finite loss; `best` holds
    /// the last good checkpoint.
    pub aborted: Option<String>,
}

fn stack_batch<S: Scalar>(data: &Dataset<S>, idx: &[usize]) -> Result<(Tensor<S>, Tensor<S>, Vec<Vec<u8>>)> {
    let first = &data.samples[idx[0]];
    let ish = first.image.shape().to_vec();
    let msh = first.mask.shape().to_vec();
    let mut images = Vec::with_capacity(idx.len() * first.image.numel());
    let mut masks = Vec::with_capacity(idx.len() * first.mask.numel());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = &data.samples[i];
        if s.image.shape() != ish || s.mask.shape() != msh {
            return Err(Error::shape("batch", "inconsistent sample shapes".to_string()));
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
        labels.push(s.label.clone());
    }
    let images = Tensor::new(&[idx.len(), ish[0], ish[1], ish[2]], images)?;
    let masks = Tensor::new(&[idx.len(), msh[0], msh[1]], masks)?;
    Ok((images, masks, labels))
}

fn classification_loss<S: Scalar>(
    graph: &mut Graph<S>,
    logits: crate::autodiff::NodeId,
    labels: &[Vec<u8>],
    task: TaskKind,
) -> Result<crate::autodiff::NodeId> {
    match task {
        TaskKind::SingleLabel => {
            let idx: Vec<usize> = labels
                .iter()
                .map(|l| l.iter().position(|&v| v == 1).unwrap_or(0))
                .collect();
            graph.cross_entropy_logits(logits, &idx)
        }
        TaskKind::MultiLabel => {
            let k = labels[0].len();
            let flat: Vec<S> = labels
                .iter()
                .flat_map(|l| l.iter().map(|&v| S::from_f64(v as f64)))
                .collect();
            let targets = Tensor::new(&[labels.len(), k], flat)?;
            graph.bce_logits(logits, &targets)
        }
    }
}

/// Mean background relevance of the current model over up to `batches`
/// batches, for the E rule of thumb.
pub fn sample_background_relevance<S: Scalar>(
    net: &mut Network<S>,
    data: &Dataset<S>,
    lrp_cfg: &LrpConfig,
    loss_cfg: &LossConfig,
    batch_size: usize,
    batches: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xE57);
    let mut out = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size).take(batches) {
        let (images, masks, _) = stack_batch(data, chunk)?;
        let mut graph = Graph::new();
        let (logits, record) = net.forward_capture(&mut graph, &images, Mode::Train, &mut rng)?;
        let maps = lrp::build_heatmaps(&mut graph, net, &record, logits, lrp_cfg)?;
        let hsh = graph.value(maps.node).shape().to_vec();
        let expanded = loss::expand_masks(&masks, hsh[1], hsh[2])?;
        let h_prime = loss::normalize_abs(&mut graph, maps.node, loss_cfg.e_stab)?;
        let uh = loss::background_relevance(&mut graph, h_prime, &expanded)?;
        out.extend(graph.value(uh).data().iter().map(|v| v.as_f64()));
    }
    if out.is_empty() {
        return Err(Error::Config("no samples available to estimate E".into()));
    }
    Ok(out)
}

/// Trains on `train_data`, validating each epoch on `val_data` and keeping
/// the checkpoint with the best validation macro-F1.
///
/// Per step: capture forward (train mode), classification loss, heatmaps
/// through the mirror network, heatmap loss, combined loss, backward,
/// global-norm gradient clip, momentum SGD update. The heatmap loss is
/// always computed and logged; with P = 0 it simply stays outside the
/// backward pass.
pub fn train<S: Scalar>(
    net: Network<S>,
    lrp_cfg: &LrpConfig,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    train_data: &Dataset<S>,
    val_data: &Dataset<S>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    loss_cfg.validate()?;
    lrp_cfg.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::Config("train and validation sets must be non-empty".into()));
    }
    if loss_cfg.p > 0.0 {
        for (i, s) in train_data.samples.iter().enumerate() {
            if s.mask.shape() != [s.image.shape()[1], s.image.shape()[2]] {
                return Err(Error::Config(format!("sample {} lacks a usable mask (P > 0 requires masks)", i)));
            }
            if !s.mask.data().iter().all(|&v| v == S::zero() || v == S::one()) {
                return Err(Error::Config(format!("sample {} mask is not binary", i)));
            }
        }
    }

    let mut net = net;
    let mut loss_cfg = *loss_cfg;
    if let Some(divisor) = cfg.auto_e_divisor {
        let samples = sample_background_relevance(
            &mut net,
            train_data,
            lrp_cfg,
            &loss_cfg,
            cfg.batch_size,
            4,
            cfg.seed,
        )?;
        loss_cfg.e_slope = loss::estimate_e(&samples, divisor)?.e;
    }
    let e_used = loss_cfg.e_slope;

    let task = net.spec().task;
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x5F0F_1E55);
    let mut dropout_rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0xD20F);
    let mut velocity: Vec<Vec<S>> = net.params().iter().map(|p| vec![S::zero(); p.numel()]).collect();

    let mut log = Vec::new();
    let mut val_history = Vec::new();
    let mut best: Option<(Network<S>, usize, f64)> = None;
    let mut aborted = None;
    let momentum = S::from_f64(cfg.momentum);
    let lr = S::from_f64(cfg.lr);

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (images, masks, labels) = stack_batch(train_data, chunk)?;
            let mut graph = Graph::new();
            let forward = net.forward_capture(&mut graph, &images, Mode::Train, &mut dropout_rng);
            let (logits, record) = match forward {
                Ok(v) => v,
                Err(Error::Numeric { op, detail }) => {
                    aborted = Some(format!("{}: {}", op, detail));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let l_c = classification_loss(&mut graph, logits, &labels, task)?;
            let maps = lrp::build_heatmaps(&mut graph, &net, &record, logits, lrp_cfg)?;
            let l_h = loss::heatmap_loss(&mut graph, maps, &masks, &loss_cfg)?;
            let l_is = loss::combined_loss(&mut graph, l_c, l_h, loss_cfg.p)?;

            let (vc, vh, vis) = (
                graph.value(l_c).item().as_f64(),
                graph.value(l_h).item().as_f64(),
                graph.value(l_is).item().as_f64(),
            );
            if !vis.is_finite() || !vc.is_finite() || !vh.is_finite() {
                aborted = Some(format!("non-finite loss at epoch {} step {}", epoch, step));
                break 'epochs;
            }

            let grads = graph.backward(l_is, Tensor::scalar(S::one()))?;
            let mut sq_norm = 0.0f64;
            let param_grads: Vec<Option<&Tensor<S>>> =
                record.param_nodes.iter().map(|&n| grads.get(n)).collect();
            for g in param_grads.iter().flatten() {
                sq_norm += g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            }
            let norm = sq_norm.sqrt();
            let scale =
                if norm > cfg.grad_clip_norm { S::from_f64(cfg.grad_clip_norm / norm) } else { S::one() };
            // Logged as the post-clip global norm, so the clipping
            // invariant is visible straight from the training log.
            let clipped_norm = norm.min(cfg.grad_clip_norm);

            for (pid, g) in param_grads.iter().enumerate() {
                let Some(g) = g else { continue };
                let v = &mut velocity[pid];
                let mut new_param = net.param(pid).data().to_vec();
                for ((vi, pi), &gi) in v.iter_mut().zip(new_param.iter_mut()).zip(g.data()) {
                    *vi = momentum * *vi + gi * scale;
                    *pi = *pi - lr * *vi;
                }
                let shape = net.param(pid).shape().to_vec();
                net.set_param(pid, Tensor::new(&shape, new_param)?)?;
            }
            log.push(LogRow { epoch, step, loss_c: vc, loss_h: vh, loss_is: vis, grad_norm: clipped_norm });
        }

        let val = match evaluate(&mut net, val_data, cfg.batch_size) {
            Ok(v) => v,
            Err(Error::Numeric { op, detail }) => {
                aborted = Some(format!("validation {}: {}", op, detail));
                break 'epochs;
            }
            Err(e) => return Err(e),
        };
        let f1 = val.report().macro_f1;
        val_history.push((epoch, f1));
        if let Some(f1) = f1 {
            // Ties go to the later epoch: with the classification metric
            // saturated, later checkpoints carry better-trained heatmaps.
            if best.as_ref().map_or(true, |(_, _, b)| f1 >= *b || b.is_nan()) {
                best = Some((net.clone(), epoch, f1));
            }
        } else if best.is_none() {
            best = Some((net.clone(), epoch, f64::NAN));
        }
    }

    let (best_net, best_epoch, best_val_f1) = best.unwrap_or_else(|| (net.clone(), 0, f64::NAN));
    Ok(TrainOutcome {
        best: best_net,
        last: net,
        best_epoch,
        best_val_f1,
        e_used,
        log,
        val_history,
        aborted,
    })
}

/// Outcome of an evaluation pass, by task kind.
pub enum Evaluation {
    Single {
        cm: ConfusionMatrix,
        /// Softmax probabilities per sample.
        scores: Vec<Vec<f64>>,
        preds: Vec<usize>,
        labels: Vec<usize>,
    },
    Multi {
        counts: Vec<BinaryCounts>,
        /// Sigmoid scores per sample.
        scores: Vec<Vec<f64>>,
        thresholds: Vec<f64>,
        preds: Vec<Vec<u8>>,
    },
}

impl Evaluation {
    pub fn report(&self) -> MetricsReport {
        match self {
            Evaluation::Single { cm, scores, labels, .. } => {
                let mut r = metrics::metrics(cm);
                r.auc = metrics::pairwise_macro_auc(scores, labels).ok();
                r
            }
            Evaluation::Multi { counts, .. } => {
                let mut r = metrics::metrics_from_counts(counts);
                r.wilson_accuracy = Some(
                    counts
                        .iter()
                        .map(|c| {
                            metrics::wilson_interval(c.tp + c.tn, c.n(), 1.96)
                                .unwrap_or((0.0, 1.0))
                        })
                        .collect(),
                );
                r
            }
        }
    }

    pub fn accuracy(&self) -> f64 {
        match self {
            Evaluation::Single { cm, .. } => {
                let correct: u64 = (0..cm.k).map(|c| cm.at(c, c)).sum();
                correct as f64 / cm.total() as f64
            }
            Evaluation::Multi { counts, .. } => {
                let (mut good, mut all) = (0u64, 0u64);
                for c in counts {
                    good += c.tp + c.tn;
                    all += c.n();
                }
                good as f64 / all as f64
            }
        }
    }
}

/// Raw class scores in eval mode: softmax probabilities (single-label) or
/// sigmoids (multi-label).
pub fn class_scores<S: Scalar>(
    net: &mut Network<S>,
    data: &Dataset<S>,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut scores = Vec::with_capacity(data.len());
    let single = net.spec().task == TaskKind::SingleLabel;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, _, _) = stack_batch(data, chunk)?;
        let mut graph = Graph::new();
        let (logits, _) = net.forward_capture(&mut graph, &images, Mode::Eval, &mut rng)?;
        let v = graph.value(logits);
        let k = v.shape()[1];
        for b in 0..chunk.len() {
            let row: Vec<f64> = (0..k).map(|c| v.data()[b * k + c].as_f64()).collect();
            scores.push(if single { softmax(&row) } else { row.iter().map(|&x| sigmoid(x)).collect() });
        }
    }
    Ok(scores)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-class thresholds maximizing F1 on held-out scores (used on the
/// validation split, then frozen for test).
pub fn fit_thresholds(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Vec<f64> {
    let k = scores.first().map_or(0, |s| s.len());
    (0..k)
        .map(|c| {
            let mut cand: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            cand.sort_by(|a, b| a.partial_cmp(b).unwrap());
            cand.dedup();
            let mut best = (0.5f64, -1.0f64);
            for &t in &cand {
                let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
                for (s, l) in scores.iter().zip(labels) {
                    let pred = s[c] >= t;
                    match (pred, l[c] == 1) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        (false, false) => {}
                    }
                }
                let denom = 2 * tp + fp + fn_;
                let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
                if f1 > best.1 {
                    best = (t, f1);
                }
            }
            best.0
        })
        .collect()
}

/// Eval-mode evaluation. Single-label: argmax into a confusion matrix.
/// Multi-label: thresholds fitted on this dataset's scores (pass a
/// validation set to fit, then use [`evaluate_multi_with`] on test data).
pub fn evaluate<S: Scalar>(
    net: &mut Network<S>,
    data: &Dataset<S>,
    batch_size: usize,
) -> Result<Evaluation> {
    match net.spec().task {
        TaskKind::SingleLabel => {
            let scores = class_scores(net, data, batch_size)?;
            let k = data.classes;
            let mut cm = ConfusionMatrix::new(k);
            let mut preds = Vec::with_capacity(data.len());
            let mut labels = Vec::with_capacity(data.len());
            for (i, s) in scores.iter().enumerate() {
                let pred = argmax(s);
                let truth = data.class_of(i);
                cm.record(truth, pred);
                preds.push(pred);
                labels.push(truth);
            }
            Ok(Evaluation::Single { cm, scores, preds, labels })
        }
        TaskKind::MultiLabel => {
            let scores = class_scores(net, data, batch_size)?;
            let labels: Vec<Vec<u8>> = data.samples.iter().map(|s| s.label.clone()).collect();
            let thresholds = fit_thresholds(&scores, &labels);
            evaluate_multi_with(data, &scores, &thresholds)
        }
    }
}

/// Multi-label evaluation against pre-fitted thresholds.
pub fn evaluate_multi_with<S: Scalar>(
    data: &Dataset<S>,
    scores: &[Vec<f64>],
    thresholds: &[f64],
) -> Result<Evaluation> {
    let k = data.classes;
    if thresholds.len() != k {
        return Err(Error::Config("one threshold per class required".into()));
    }
    let mut counts = vec![BinaryCounts { tp: 0, fp: 0, tn: 0, fn_: 0 }; k];
    let mut preds = Vec::with_capacity(data.len());
    for (i, s) in scores.iter().enumerate() {
        let mut row = Vec::with_capacity(k);
        for c in 0..k {
            let pred = s[c] >= thresholds[c];
            let truth = data.samples[i].label[c] == 1;
            match (pred, truth) {
                (true, true) => counts[c].tp += 1,
                (true, false) => counts[c].fp += 1,
                (false, true) => counts[c].fn_ += 1,
                (false, false) => counts[c].tn += 1,
            }
            row.push(u8::from(pred));
        }
        preds.push(row);
    }
    Ok(Evaluation::Multi { counts, scores: scores.to_vec(), thresholds: thresholds.to_vec(), preds })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean over the dataset of the per-sample background share of absolute
/// normalized relevance, `Σ_bg |H'| / Σ |H'|`, across all class heatmaps.
pub fn background_relevance_fraction<S: Scalar>(
    net: &mut Network<S>,
    data: &Dataset<S>,
    lrp_cfg: &LrpConfig,
    batch_size: usize,
) -> Result<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, masks, _) = stack_batch(data, chunk)?;
        let mut graph = Graph::new();
        let (logits, record) = net.forward_capture(&mut graph, &images, Mode::Eval, &mut rng)?;
        let maps = lrp::build_heatmaps(&mut graph, net, &record, logits, lrp_cfg)?;
        let h = graph.value(maps.node);
        let sh = h.shape().to_vec(); // (B, K, C, Y, X)
        let per_sample = sh[1] * sh[2] * sh[3] * sh[4];
        let plane = sh[3] * sh[4];
        for b in 0..sh[0] {
            let mrow = &masks.data()[b * plane..(b + 1) * plane];
            let (mut bg, mut all) = (0.0f64, 0.0f64);
            for j in 0..per_sample {
                let v = h.data()[b * per_sample + j].as_f64().abs();
                all += v;
                if mrow[j % plane] == S::zero() {
                    bg += v;
                }
            }
            if all > 0.0 {
                total += bg / all;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Numeric { op: "background_relevance_fraction", detail: "all heatmaps were zero".into() });
    }
    Ok(total / count as f64)
}

/// Biased-vs-clean comparison for one trained model on paired test sets
/// (identical apart from injected bias shapes). Single-label only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub cm_biased: ConfusionMatrix,
    pub cm_clean: ConfusionMatrix,
    pub accuracy_biased: f64,
    pub accuracy_clean: f64,
    /// Fraction of samples receiving the same prediction on both variants.
    pub agreement: f64,
    pub bg_relevance_fraction_biased: f64,
    pub bg_relevance_fraction_clean: f64,
}

pub fn biased_clean_compare<S: Scalar>(
    net: &mut Network<S>,
    lrp_cfg: &LrpConfig,
    clean: &Dataset<S>,
    biased: &Dataset<S>,
    batch_size: usize,
) -> Result<CompareReport> {
    if net.spec().task != TaskKind::SingleLabel {
        return Err(Error::Config("biased/clean comparison supports single-label tasks".into()));
    }
    if clean.len() != biased.len() {
        return Err(Error::Config("paired datasets must have the same length".into()));
    }
    for i in 0..clean.len() {
        if clean.samples[i].label != biased.samples[i].label {
            return Err(Error::Config(format!("paired datasets disagree on label of sample {}", i)));
        }
    }
    let eb = evaluate(net, biased, batch_size)?;
    let ec = evaluate(net, clean, batch_size)?;
    let (Evaluation::Single { cm: cm_biased, preds: pb, .. }, Evaluation::Single { cm: cm_clean, preds: pc, .. }) =
        (&eb, &ec)
    else {
        unreachable!("single-label checked above")
    };
    let agree = pb.iter().zip(pc).filter(|(a, b)| a == b).count() as f64 / pb.len() as f64;
    Ok(CompareReport {
        cm_biased: cm_biased.clone(),
        cm_clean: cm_clean.clone(),
        accuracy_biased: eb.accuracy(),
        accuracy_clean: ec.accuracy(),
        agreement: agree,
        bg_relevance_fraction_biased: background_relevance_fraction(net, biased, lrp_cfg, batch_size)?,
        bg_relevance_fraction_clean: background_relevance_fraction(net, clean, lrp_cfg, batch_size)?,
    })
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,step,loss_c,loss_h,loss_is,grad_norm")?;
    for r in rows {
        writeln!(f, "{},{},{},{},{},{}", r.epoch, r.step, r.loss_c, r.loss_h, r.loss_is, r.grad_norm)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub precision: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_macro_f1: Option<f64>,
    pub e_used: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    meta: CheckpointMeta,
    spec: crate::classifier::NetworkSpec,
    params: Vec<String>,
    running: Vec<(String, String)>,
}

/// Checkpoint directory: `manifest.json` plus one ISTN tensor per
/// parameter and per running statistic.
pub fn save_checkpoint<S: Scalar>(dir: &Path, net: &Network<S>, meta: &CheckpointMeta) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut params = Vec::new();
    for (i, p) in net.params().iter().enumerate() {
        let file = format!("p{:04}.istn", i);
        crate::io::save_tensor(&dir.join(&file), p)?;
        params.push(file);
    }
    let mut running = Vec::new();
    for (i, r) in net.running_stats().iter().enumerate() {
        let mf = format!("r{:04}_mean.istn", i);
        let vf = format!("r{:04}_var.istn", i);
        crate::io::save_tensor(&dir.join(&mf), &r.mean)?;
        crate::io::save_tensor(&dir.join(&vf), &r.var)?;
        running.push((mf, vf));
    }
    let manifest =
        CheckpointManifest { meta: meta.clone(), spec: net.spec().clone(), params, running };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(dir: &Path) -> Result<(Network<S>, CheckpointMeta)> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.meta.format != "isnet-checkpoint" || manifest.meta.version != 1 {
        return Err(Error::Corrupt("not an isnet checkpoint directory".into()));
    }
    let mut net = Network::<S>::build(&manifest.spec, manifest.meta.seed)?;
    if manifest.params.len() != net.params().len() {
        return Err(Error::Corrupt(format!(
            "checkpoint has {} parameters, spec compiles to {}",
            manifest.params.len(),
            net.params().len()
        )));
    }
    for (i, file) in manifest.params.iter().enumerate() {
        net.set_param(i, crate::io::load_tensor(&dir.join(file))?)?;
    }
    let mut running = Vec::new();
    for (mf, vf) in &manifest.running {
        running.push(RunningStat {
            mean: crate::io::load_tensor(&dir.join(mf))?,
            var: crate::io::load_tensor(&dir.join(vf))?,
        });
    }
    net.set_running(running)?;
    Ok((net, manifest.meta))
}
