// Shortcut-learning experiment probe.
use isnet_core::classifier::{self, InputShape, Network, TaskKind};
use isnet_core::loss::LossConfig;
use isnet_core::lrp::LrpConfig;
use isnet_core::synth::{self, BiasSpec, GenerateConfig};
use isnet_core::train::{self, TrainConfig};

fn main() {
    let t0 = std::time::Instant::now();
    let gc = GenerateConfig::new(3, 32, 200, 7);
    let clean: synth::Dataset<f32> = synth::generate(&gc).unwrap();
    let biased = synth::inject_bias(&clean, &BiasSpec::default_single(3, 32).unwrap()).unwrap();
    let splits = synth::split(&clean, (0.75, 0.125, 0.125), 7).unwrap();
    let b_train = biased.subset(&splits.train);
    let b_val = biased.subset(&splits.val);
    let b_test = biased.subset(&splits.test);
    let c_test = clean.subset(&splits.test);

    let spec = classifier::mini_dense(InputShape { channels: 1, height: 32, width: 32 }, 3, TaskKind::SingleLabel);
    let lrp = LrpConfig::default();
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let divisor: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(10.0);
    let skip_baseline = std::env::args().nth(3).is_some();

    for (name, p) in [("baseline", 0.0), ("isnet", 0.7)] {
        if skip_baseline && p == 0.0 { continue; }
        let net = Network::<f32>::build(&spec, 1).unwrap();
        let tc = TrainConfig { epochs, seed: 1, auto_e_divisor: if p > 0.0 { Some(divisor) } else { None }, ..TrainConfig::default() };
        let lc = LossConfig { p, ..LossConfig::default() };
        let out = train::train(net, &lrp, &lc, &tc, &b_train, &b_val).unwrap();
        println!("{}: aborted={:?} best_epoch={} best_val_f1={:.3} E={:.3} [{:?}]", name, out.aborted, out.best_epoch, out.best_val_f1, out.e_used, t0.elapsed());
        let mut best = out.best;
        let report = train::biased_clean_compare(&mut best, &lrp, &c_test, &b_test, 10).unwrap();
        println!(
            "{}: acc_biased={:.3} acc_clean={:.3} gap={:+.3} agreement={:.3} bgfrac_biased={:.3} bgfrac_clean={:.3}",
            name,
            report.accuracy_biased,
            report.accuracy_clean,
            report.accuracy_biased - report.accuracy_clean,
            report.agreement,
            report.bg_relevance_fraction_biased,
            report.bg_relevance_fraction_clean
        );
        let loss_rows: Vec<String> = out.log.iter().step_by(135).map(|r| format!("e{} lc={:.3} lh={:.3}", r.epoch, r.loss_c, r.loss_h)).collect();
        println!("{}: {}", name, loss_rows.join(" | "));
    }
    println!("total {:?}", t0.elapsed());
}
