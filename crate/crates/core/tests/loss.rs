//! Heatmap-loss unit values, invariants and gradient masking.

mod support;

use isnet_core::autodiff::Graph;
use isnet_core::loss::{self, LossConfig};
use isnet_core::lrp::HeatmapBatch;
use isnet_core::tensor::Tensor;
use proptest::prelude::*;

fn cfg() -> LossConfig {
    LossConfig::default()
}

/// L_H of a hand-built heatmap batch (B,K,C,Y,X) against (B,Y,X) masks.
fn lh_of(h: &Tensor<f64>, masks: &Tensor<f64>, c: &LossConfig) -> f64 {
    let mut g = Graph::new();
    let node = g.constant(h.clone());
    let l = loss::heatmap_loss(&mut g, HeatmapBatch { node }, masks, c).unwrap();
    g.value(l).item()
}

#[test]
fn normalize_abs_examples() {
    let mut g = Graph::<f64>::new();
    // All-zero heatmaps stay zero (the stabilizer enforces 0/0 = 0).
    let zero = g.constant(Tensor::zeros(&[1, 1, 1, 2, 2]));
    let hz = loss::normalize_abs(&mut g, zero, 1e-4).unwrap();
    assert!(g.value(hz).data().iter().all(|&v| v == 0.0));

    // Variance 1 - e makes the denominator exactly 1: H' = |H|.
    let e = 1e-4;
    let a = (1.0f64 - e).sqrt();
    let h = g.constant(Tensor::from_f64_slice(&[1, 1, 1, 1, 2], &[a, -a]).unwrap());
    let hn = loss::normalize_abs(&mut g, h, e).unwrap();
    let got = g.value(hn).data();
    assert!((got[0] - a).abs() < 1e-12 && (got[1] - a).abs() < 1e-12, "{:?}", got);
}

#[test]
fn normalize_abs_scaling_preserves_argmax() {
    let mut g = Graph::<f64>::new();
    let data = [0.1, -0.9, 0.4, 0.2];
    let h = g.constant(Tensor::from_f64_slice(&[1, 1, 1, 2, 2], &data).unwrap());
    let hn1 = loss::normalize_abs(&mut g, h, 1e-4).unwrap();
    let scaled = g.mul_const(h, 17.0);
    let hn2 = loss::normalize_abs(&mut g, scaled, 1e-4).unwrap();
    let argmax = |v: &[f64]| {
        v.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
    };
    assert_eq!(argmax(g.value(hn1).data()), argmax(g.value(hn2).data()));
}

#[test]
fn background_relevance_worked_examples() {
    let mut g = Graph::<f64>::new();
    // 2x2 map [[1,-1],[0,2]] already normalized; mask [[1,1],[0,0]].
    let h = g.constant(Tensor::from_f64_slice(&[1, 1, 1, 2, 2], &[1.0, -1.0, 0.0, 2.0]).unwrap());
    let habs = g.abs(h);
    let masks = loss::expand_masks(
        &Tensor::from_f64_slice(&[1, 2, 2], &[1.0, 1.0, 0.0, 0.0]).unwrap(),
        1,
        1,
    )
    .unwrap();
    let uh = loss::background_relevance(&mut g, habs, &masks).unwrap();
    assert_eq!(g.value(uh).shape(), &[1, 1]);
    assert_eq!(g.value(uh).item(), 2.0);

    // Mask of ones: no background at all.
    let ones = loss::expand_masks(&Tensor::full(&[1, 2, 2], 1.0), 1, 1).unwrap();
    let uh1 = loss::background_relevance(&mut g, habs, &ones).unwrap();
    assert_eq!(g.value(uh1).item(), 0.0);

    // Mask of zeros: everything counts.
    let zeros = loss::expand_masks(&Tensor::zeros(&[1, 2, 2]), 1, 1).unwrap();
    let uh0 = loss::background_relevance(&mut g, habs, &zeros).unwrap();
    assert_eq!(g.value(uh0).item(), 4.0);
}

#[test]
fn saturation_and_penalty_values() {
    let mut g = Graph::<f64>::new();
    // uh = 0 -> f = 0 -> g = 0.
    let zero = g.constant(Tensor::from_f64_slice(&[1, 1], &[0.0]).unwrap());
    let f0 = loss::saturate(&mut g, zero, 2.0).unwrap();
    assert_eq!(g.value(f0).item(), 0.0);
    let g0 = loss::penalize(&mut g, f0).unwrap();
    assert_eq!(g.value(g0).item(), 0.0);

    // uh = E -> f = 1/2 -> g = ln 2.
    let e = 2.0;
    let uh = g.constant(Tensor::from_f64_slice(&[1, 1], &[e]).unwrap());
    let f = loss::saturate(&mut g, uh, e).unwrap();
    assert_eq!(g.value(f).item(), 0.5);
    let gx = loss::penalize(&mut g, f).unwrap();
    assert!((g.value(gx).item() - std::f64::consts::LN_2).abs() < 1e-12);

    // E = 1, uh = 10 -> f = 10/11.
    let uh10 = g.constant(Tensor::from_f64_slice(&[1, 1], &[10.0]).unwrap());
    let f10 = loss::saturate(&mut g, uh10, 1.0).unwrap();
    assert!((g.value(f10).item() - 10.0 / 11.0).abs() < 1e-12);
}

#[test]
fn combined_loss_extremes_and_mixture() {
    let mut g = Graph::<f64>::new();
    let lc = g.constant(Tensor::scalar(1.0));
    let lh = g.constant(Tensor::scalar(2.0));
    let p0 = loss::combined_loss(&mut g, lc, lh, 0.0).unwrap();
    assert_eq!(g.value(p0).item(), 1.0);
    let p1 = loss::combined_loss(&mut g, lc, lh, 1.0).unwrap();
    assert_eq!(g.value(p1).item(), 2.0);
    let p07 = loss::combined_loss(&mut g, lc, lh, 0.7).unwrap();
    assert!((g.value(p07).item() - 1.7).abs() < 1e-12);
    assert!(loss::combined_loss(&mut g, lc, lh, 1.5).is_err());
}

#[test]
fn estimate_e_rule_of_thumb() {
    let samples = vec![100.0; 8];
    let est = loss::estimate_e(&samples, 10.0).unwrap();
    assert_eq!(est.e, 10.0);
    assert!(!est.degenerate);
    // f(mean) = mean / (mean + E) = 100/110.
    assert!((100.0 / (100.0 + est.e) - 100.0 / 110.0).abs() < 1e-12);

    let est100 = loss::estimate_e(&samples, 100.0).unwrap();
    assert_eq!(est100.e, 1.0);
    assert!((100.0 / (100.0 + est100.e) - 0.990).abs() < 1e-3);

    let degenerate = loss::estimate_e(&[0.0, 0.0], 10.0).unwrap();
    assert_eq!(degenerate.e, 1.0);
    assert!(degenerate.degenerate);

    assert!(loss::estimate_e(&[], 10.0).is_err());
    assert!(loss::estimate_e(&samples, 5.0).is_err());
}

#[test]
fn heatmap_loss_is_zero_iff_background_is_clean() {
    // Relevance only inside the mask: L_H = 0.
    let h = Tensor::from_f64_slice(&[1, 1, 1, 2, 2], &[3.0, -1.0, 0.0, 0.0]).unwrap();
    let mask_fg = Tensor::from_f64_slice(&[1, 2, 2], &[1.0, 1.0, 0.0, 0.0]).unwrap();
    assert_eq!(lh_of(&h, &mask_fg, &cfg()), 0.0);
    // Any background relevance makes it strictly positive.
    let mask_partial = Tensor::from_f64_slice(&[1, 2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap();
    assert!(lh_of(&h, &mask_partial, &cfg()) > 0.0);
}

#[test]
fn heatmap_loss_gradient_reaches_only_background_pixels() {
    // The loss never penalizes relevance inside the masks: the gradient at
    // the normalized heatmap H' is exactly zero wherever M = 1. (The raw
    // heatmap still feels the global variance normalizer, which rescales
    // all pixels alike; the per-pixel penalty path is what must vanish.)
    let mut g = Graph::<f64>::new();
    let h = g.leaf(
        Tensor::from_f64_slice(&[1, 1, 1, 2, 2], &[0.5, -0.25, 1.0, 2.0]).unwrap(),
        true,
    );
    let masks = loss::expand_masks(
        &Tensor::from_f64_slice(&[1, 2, 2], &[1.0, 1.0, 0.0, 0.0]).unwrap(),
        1,
        1,
    )
    .unwrap();
    let c = cfg();
    let h_prime = loss::normalize_abs(&mut g, h, c.e_stab).unwrap();
    let uh = loss::background_relevance(&mut g, h_prime, &masks).unwrap();
    let f = loss::saturate(&mut g, uh, c.e_slope).unwrap();
    let f = g.clamp(f, 0.0, c.clamp_hi);
    let pen = loss::penalize(&mut g, f).unwrap();
    let l = g.mean_all(pen);
    let grads = g.backward(l, Tensor::scalar(1.0)).unwrap();
    let dh = grads.get(h_prime).expect("normalized heatmap gets a gradient");
    assert_eq!(dh.data()[0], 0.0, "masked pixel");
    assert_eq!(dh.data()[1], 0.0, "masked pixel");
    assert!(dh.data()[2] != 0.0 && dh.data()[3] != 0.0, "background pixels drive the loss");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Increasing any single background-relevance total strictly increases
    /// the loss (below the clamp), and the loss is never negative.
    #[test]
    fn monotonic_in_background_relevance(
        base in 0.0f64..5.0,
        bump in 0.01f64..2.0,
        others in prop::collection::vec(0.0f64..5.0, 1..6),
    ) {
        let e = 1.0;
        let g_of = |uh: f64| -> f64 { -(1.0 - (uh / (uh + e)).min(1.0 - 1e-4)).ln() };
        let l1: f64 = (g_of(base) + others.iter().map(|&u| g_of(u)).sum::<f64>())
            / (others.len() + 1) as f64;
        let l2: f64 = (g_of(base + bump) + others.iter().map(|&u| g_of(u)).sum::<f64>())
            / (others.len() + 1) as f64;
        prop_assert!(l1 >= 0.0);
        prop_assert!(l2 > l1);
    }

    /// Positive scaling preserves the ordering of background totals.
    #[test]
    fn positive_scaling_preserves_background_ordering(
        vals in prop::collection::vec(-3.0f64..3.0, 8),
        alpha in 0.05f64..20.0,
    ) {
        let mut g = Graph::<f64>::new();
        let h = g.constant(Tensor::from_f64_slice(&[2, 1, 1, 2, 2], &vals).unwrap());
        let masks = loss::expand_masks(
            &Tensor::from_f64_slice(&[2, 2, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap(),
            1, 1,
        ).unwrap();
        let hp1 = loss::normalize_abs(&mut g, h, 1e-4).unwrap();
        let uh1 = loss::background_relevance(&mut g, hp1, &masks).unwrap();
        let hs = g.mul_const(h, alpha);
        let hp2 = loss::normalize_abs(&mut g, hs, 1e-4).unwrap();
        let uh2 = loss::background_relevance(&mut g, hp2, &masks).unwrap();
        let a = g.value(uh1).data().to_vec();
        let b = g.value(uh2).data().to_vec();
        prop_assert_eq!(a.len(), b.len());
        for i in 0..a.len() {
            for j in 0..a.len() {
                prop_assert_eq!(a[i] < a[j], b[i] < b[j]);
            }
        }
    }
}
