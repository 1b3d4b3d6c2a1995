//! Subcommand implementations.

use crate::config::ExperimentConfig;
use crate::{EvalCli, ExplainCli, SynthCli, TrainCli};
use isnet_core::classifier::{self, InputShape, Mode, Network, TaskKind};
use isnet_core::lrp::{self, LrpConfig};
use isnet_core::scalar::Scalar;
use isnet_core::synth::{self, BiasSpec, GenerateConfig};
use isnet_core::tensor::Tensor;
use isnet_core::train::{self, CheckpointMeta};
use isnet_core::{autodiff::Graph, Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

pub fn synth<S: Scalar>(a: SynthCli) -> Result<()> {
    let mut cfg = GenerateConfig::new(a.classes, a.size, a.per_class, a.seed);
    cfg.channels = a.channels;
    cfg.multi_label = a.multi_label;
    let dataset: synth::Dataset<S> = synth::generate(&cfg)?;
    let bias = if a.bias && !a.no_bias {
        Some(BiasSpec::default_for(a.classes, a.size, a.multi_label)?)
    } else {
        None
    };
    let dataset = match &bias {
        Some(spec) => synth::inject_bias(&dataset, spec)?,
        None => dataset,
    };
    let splits = synth::split(&dataset, (0.75, 0.125, 0.125), a.seed)?;
    let manifest = synth::save_dataset(&a.out, &dataset, &cfg, bias.as_ref(), &splits)?;
    println!(
        "wrote {} samples ({} train / {} val / {} test) to {}",
        dataset.len(),
        manifest.splits.train.len(),
        manifest.splits.val.len(),
        manifest.splits.test.len(),
        a.out.display()
    );
    println!("digest {}", manifest.content_digest);
    Ok(())
}

pub fn train<S: Scalar>(a: TrainCli) -> Result<()> {
    let file_cfg = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    // Flags override the config file, which overrides defaults.
    let preset = a.preset.clone();
    let preset = file_cfg.preset.filter(|_| a.preset == "plain-small").unwrap_or(preset);
    let lrp_cfg = file_cfg.lrp.unwrap_or_default();
    let mut loss_cfg = file_cfg.loss.unwrap_or_default();
    let mut train_cfg = file_cfg.train.unwrap_or_default();
    if let Some(p) = a.p {
        loss_cfg.p = p;
    }
    if let Some(e) = a.e {
        loss_cfg.e_slope = e;
    }
    if a.auto_e.is_some() {
        train_cfg.auto_e_divisor = a.auto_e;
    }
    if let Some(epochs) = a.epochs {
        train_cfg.epochs = epochs;
    }
    if let Some(seed) = a.seed {
        train_cfg.seed = seed;
    }

    let (dataset, manifest) = synth::load_dataset::<S>(&a.data)?;
    let task = if manifest.multi_label { TaskKind::MultiLabel } else { TaskKind::SingleLabel };
    let input = InputShape {
        channels: manifest.config.channels,
        height: manifest.config.size,
        width: manifest.config.size,
    };
    let spec = classifier::preset(&preset, input, manifest.classes, task)?;
    let net = Network::<S>::build(&spec, train_cfg.seed)?;
    eprintln!(
        "training {} ({} parameters) on {} train / {} val samples, P = {}",
        preset,
        net.num_params(),
        manifest.splits.train.len(),
        manifest.splits.val.len(),
        loss_cfg.p
    );

    let train_set = dataset.subset(&manifest.splits.train);
    let val_set = dataset.subset(&manifest.splits.val);
    let outcome = train::train(net, &lrp_cfg, &loss_cfg, &train_cfg, &train_set, &val_set)?;
    if let Some(reason) = &outcome.aborted {
        eprintln!("training aborted early: {reason}; keeping the last good checkpoint");
    }

    std::fs::create_dir_all(&a.out)?;
    let meta = CheckpointMeta {
        format: "isnet-checkpoint".into(),
        version: 1,
        precision: if S::DTYPE as u8 == 0 { "f32".into() } else { "f64".into() },
        seed: train_cfg.seed,
        best_epoch: outcome.best_epoch,
        val_macro_f1: if outcome.best_val_f1.is_nan() { None } else { Some(outcome.best_val_f1) },
        e_used: outcome.e_used,
    };
    train::save_checkpoint(&a.out, &outcome.best, &meta)?;
    train::write_log_csv(&a.out.join("log.csv"), &outcome.log)?;
    let run_cfg = serde_json::json!({
        "preset": preset,
        "data": a.data.display().to_string(),
        "lrp": lrp_cfg,
        "loss": { "p": loss_cfg.p, "e_slope": outcome.e_used, "e_stab": loss_cfg.e_stab, "clamp_hi": loss_cfg.clamp_hi },
        "train": train_cfg,
        "aborted": outcome.aborted,
        "val_history": outcome.val_history,
    });
    std::fs::write(a.out.join("run.json"), serde_json::to_string_pretty(&run_cfg)?)?;
    println!(
        "best epoch {} (val macro-F1 {:.4}); checkpoint written to {}",
        outcome.best_epoch,
        outcome.best_val_f1,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    metrics: isnet_core::metrics::MetricsReport,
    accuracy: f64,
    confusion: Option<isnet_core::metrics::ConfusionMatrix>,
    compare: Option<train::CompareReport>,
}

pub fn eval<S: Scalar>(a: EvalCli) -> Result<()> {
    let (mut net, _meta) = train::load_checkpoint::<S>(&a.ckpt)?;
    let (dataset, manifest) = synth::load_dataset::<S>(&a.data)?;
    let test = dataset.subset(&manifest.splits.test);
    let evaluation = match net.spec().task {
        TaskKind::SingleLabel => train::evaluate(&mut net, &test, 10)?,
        TaskKind::MultiLabel => {
            // Thresholds fitted on validation, frozen for test.
            let val = dataset.subset(&manifest.splits.val);
            let val_scores = train::class_scores(&mut net, &val, 10)?;
            let val_labels: Vec<Vec<u8>> = val.samples.iter().map(|s| s.label.clone()).collect();
            let thresholds = train::fit_thresholds(&val_scores, &val_labels);
            let test_scores = train::class_scores(&mut net, &test, 10)?;
            train::evaluate_multi_with(&test, &test_scores, &thresholds)?
        }
    };
    let confusion = match &evaluation {
        train::Evaluation::Single { cm, .. } => Some(cm.clone()),
        train::Evaluation::Multi { .. } => None,
    };
    let compare = match &a.clean_data {
        None => None,
        Some(clean_dir) => {
            let (clean, cmanifest) = synth::load_dataset::<S>(clean_dir)?;
            if cmanifest.splits != manifest.splits {
                return Err(Error::Config(
                    "paired datasets must share the same splits (generate them with the same seed)".into(),
                ));
            }
            let clean_test = clean.subset(&cmanifest.splits.test);
            Some(train::biased_clean_compare(&mut net, &LrpConfig::default(), &clean_test, &test, 10)?)
        }
    };
    let report = EvalReport {
        accuracy: evaluation.accuracy(),
        metrics: evaluation.report(),
        confusion,
        compare,
    };
    let json = serde_json::to_string_pretty(&report)?;
    match &a.report {
        Some(path) => {
            std::fs::write(path, &json)?;
            println!("report written to {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

pub fn explain<S: Scalar>(a: ExplainCli) -> Result<()> {
    let (mut net, _) = train::load_checkpoint::<S>(&a.ckpt)?;
    let image: Tensor<S> = isnet_core::io::load_tensor(&a.input)?;
    if image.rank() != 3 {
        return Err(Error::Config(format!("input must be (C, Y, X), got {:?}", image.shape())));
    }
    let sh = image.shape().to_vec();
    let batch = image.reshape(&[1, sh[0], sh[1], sh[2]])?;
    let k_total = net.classes();
    if let Some(k) = a.class {
        if k >= k_total {
            return Err(Error::Config(format!("class {} out of range for {} classes", k, k_total)));
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut graph = Graph::new();
    let (logits, record) = net.forward_capture(&mut graph, &batch, Mode::Eval, &mut rng)?;
    let maps = lrp::build_heatmaps(&mut graph, &net, &record, logits, &LrpConfig::default())?;
    let all = graph.value(maps.node).clone(); // (1, K, C, Y, X)

    let classes: Vec<usize> = match a.class {
        Some(k) => vec![k],
        None => (0..k_total).collect(),
    };
    // Selected classes stacked as (1, K', C, Y, X).
    let per_map = sh.iter().product::<usize>();
    let mut data = Vec::with_capacity(classes.len() * per_map);
    for &k in &classes {
        data.extend_from_slice(&all.data()[k * per_map..(k + 1) * per_map]);
    }
    let out_tensor = Tensor::<S>::new(&[1, classes.len(), sh[0], sh[1], sh[2]], data)?;

    std::fs::create_dir_all(&a.out)?;
    isnet_core::io::save_tensor(&a.out.join("heatmaps.istn"), &out_tensor)?;
    println!(
        "wrote heatmaps.istn with shape (1, {}, {}, {}, {})",
        classes.len(),
        sh[0],
        sh[1],
        sh[2]
    );

    if a.pgm {
        for (i, &k) in classes.iter().enumerate() {
            let map = &out_tensor.data()[i * per_map..(i + 1) * per_map];
            let pgm = render_pgm(map, sh[0], sh[1], sh[2]);
            let path = a.out.join(format!("heatmap_class{}.pgm", k));
            std::fs::write(&path, pgm)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// 8-bit P5 rendering: channels summed, divided by the map's standard
/// deviation, mapped so 128 is zero relevance (~4 sigма full scale).
fn render_pgm<S: Scalar>(map: &[S], c: usize, h: usize, w: usize) -> Vec<u8> {
    let plane = h * w;
    let mut summed = vec![0.0f64; plane];
    for ci in 0..c {
        for p in 0..plane {
            summed[p] += map[ci * plane + p].as_f64();
        }
    }
    let mean = summed.iter().sum::<f64>() / plane as f64;
    let var = summed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
    let std = var.sqrt().max(1e-12);
    let mut out = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    out.extend(summed.iter().map(|&v| {
        (128.0 + 32.0 * v / std).clamp(0.0, 255.0).round() as u8
    }));
    out
}
