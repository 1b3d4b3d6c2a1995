//! Tensor engine checks: the worked examples, adjointness of every
//! transposed operator, and finite-difference gradient verification.

mod support;

use isnet_core::autodiff::Graph;
use isnet_core::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use support::{finite_difference_check, inner};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64_slice(shape, data).unwrap()
}

#[test]
fn conv_of_ones_sums_kernel_window() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let k = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, k, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).item(), 4.0);
}

#[test]
fn identity_kernel_preserves_input() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 1, 2, 3], &[1.0, -2.0, 3.0, 4.0, 0.5, -0.25]));
    let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
}

#[test]
fn conv_shape_mismatch_names_axes() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let k = g.constant(Tensor::zeros(&[2, 5, 3, 3]));
    let err = g.conv2d(x, k, None, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("channel"), "got: {msg}");
}

#[test]
fn conv_kernel_gradient_matches_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let x = Tensor::rand_uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut rng);
    let k = Tensor::rand_uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng);
    let b = Tensor::rand_uniform(&[3], -0.5, 0.5, &mut rng);
    let report = finite_difference_check(&[k, b], 1e-6, &|g, ids| {
        let xx = g.constant(x.clone());
        let y = g.conv2d(xx, ids[0], Some(ids[1]), 2, 1).unwrap();
        g.sum_all(y)
    });
    assert!(report.worst < 1e-6, "worst rel err {} {:?}", report.worst, report.failures);
}

#[test]
fn transposed_conv_is_the_adjoint() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    // Several geometries, 100 random trials each.
    for &(cin, cout, n, kk, stride, pad) in
        &[(1usize, 1usize, 4usize, 2usize, 1usize, 0usize), (2, 3, 5, 3, 1, 1), (3, 2, 6, 3, 2, 1), (2, 2, 4, 2, 2, 0)]
    {
        for _ in 0..100 {
            let mut g = Graph::<f64>::new();
            let k = g.constant(Tensor::rand_uniform(&[cin, cout, kk, kk], -1.0, 1.0, &mut rng));
            let u = Tensor::rand_uniform(&[1, cin, n, n], -1.0, 1.0, &mut rng);
            let un = g.constant(u.clone());
            let au = g.conv2d(un, k, None, stride, pad).unwrap();
            let v = Tensor::rand_uniform(g.value(au).shape(), -1.0, 1.0, &mut rng);
            let vn = g.constant(v.clone());
            let atv = g.conv2d_transposed(vn, k, stride, pad, (n, n)).unwrap();
            let lhs = inner(g.value(au), &v);
            let rhs = inner(&u, g.value(atv));
            let denom = lhs.abs().max(rhs.abs()).max(1e-12);
            assert!(
                ((lhs - rhs) / denom).abs() < 1e-10,
                "adjoint identity failed: {} vs {}",
                lhs,
                rhs
            );
        }
    }
}

#[test]
fn transposed_conv_identity_and_zero() {
    let mut g = Graph::<f64>::new();
    let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.conv2d_transposed(x, k, 1, 0, (2, 2)).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    let z = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let zy = g.conv2d_transposed(z, k, 1, 0, (2, 2)).unwrap();
    assert!(zy != y && g.value(zy).data().iter().all(|&v| v == 0.0));
}

#[test]
fn transposed_conv_geometry_mismatch_is_config_error() {
    let mut g = Graph::<f64>::new();
    let k = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let s = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
    // 4x4 is not the output size of a 3x3/stride-1 conv on 4x4 input (that
    // would be 2x2), so the pairing must be rejected.
    let err = g.conv2d_transposed(s, k, 1, 0, (4, 4)).unwrap_err();
    assert!(matches!(err, isnet_core::Error::Config(_)));
}

#[test]
fn linear_adjoint_holds() {
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    for _ in 0..100 {
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::rand_uniform(&[7, 4], -1.0, 1.0, &mut rng));
        let u = Tensor::rand_uniform(&[2, 7], -1.0, 1.0, &mut rng);
        let v = Tensor::rand_uniform(&[2, 4], -1.0, 1.0, &mut rng);
        let un = g.constant(u.clone());
        let vn = g.constant(v.clone());
        let au = g.linear(un, w, None).unwrap();
        let atv = g.linear_transposed(vn, w).unwrap();
        let lhs = inner(g.value(au), &v);
        let rhs = inner(&u, g.value(atv));
        assert!(((lhs - rhs) / lhs.abs().max(1e-12)).abs() < 1e-10);
    }
}

#[test]
fn maxpool_example_and_tie_rule() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let (y, idx) = g.maxpool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).item(), 4.0);
    assert_eq!(idx.idx[0], 3); // position (1,1) linearized

    // All-equal window: winner is the lowest linear index.
    let xt = g.constant(Tensor::full(&[1, 1, 2, 2], 5.0));
    let (yt, idxt) = g.maxpool2d(xt, 2, 2).unwrap();
    assert_eq!(g.value(yt).item(), 5.0);
    assert_eq!(idxt.idx[0], 0);

    // Unpool places the value at the recorded argmax.
    let r = g.constant(t(&[1, 1, 1, 1], &[2.5]));
    let up = g.max_unpool2d(r, &idx).unwrap();
    assert_eq!(g.value(up).data(), &[0.0, 0.0, 0.0, 2.5]);
}

#[test]
fn unpool_of_pool_preserves_window_maxima_sum() {
    // Brute force over random 3x3 inputs (pool 2, stride 1).
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    for _ in 0..50 {
        let x = Tensor::<f64>::rand_uniform(&[1, 1, 3, 3], -1.0, 1.0, &mut rng);
        let mut g = Graph::<f64>::new();
        let xn = g.constant(x.clone());
        let (y, idx) = g.maxpool2d(xn, 2, 1).unwrap();
        let up = g.max_unpool2d(y, &idx).unwrap();
        let total: f64 = g.value(up).data().iter().sum();
        // Independent evaluation of the window maxima.
        let mut expect = 0.0;
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..2 {
                    for kx in 0..2 {
                        m = m.max(x.data()[(oy + ky) * 3 + ox + kx]);
                    }
                }
                expect += m;
            }
        }
        assert!((total - expect).abs() < 1e-12);
    }
}

#[test]
fn unpool_rejects_out_of_bounds_indices() {
    let mut g = Graph::<f64>::new();
    let r = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let bad = isnet_core::autodiff::Indices {
        out_shape: vec![1, 1, 1, 1],
        in_spatial: (2, 2),
        idx: std::sync::Arc::new(vec![9]),
    };
    let err = g.max_unpool2d(r, &bad).unwrap_err();
    assert!(matches!(err, isnet_core::Error::Corrupt(_)));
}

#[test]
fn pool_and_elementwise_examples() {
    let mut g = Graph::<f64>::new();
    let ones = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let avg = g.avgpool2d(ones, 2, 2).unwrap();
    assert_eq!(g.value(avg).item(), 1.0);
    let sum = g.sumpool2d(ones, 2, 2).unwrap();
    assert_eq!(g.value(sum).item(), 4.0);

    // Variance of a constant tensor is zero.
    let c = g.constant(Tensor::full(&[3, 3], 2.5));
    let v = g.variance_all(c);
    assert_eq!(g.value(v).item(), 0.0);

    // abs(-x) == abs(x).
    let x = g.constant(t(&[4], &[1.0, -2.0, 0.0, 3.5]));
    let nx = g.mul_const(x, -1.0);
    let a1 = g.abs(x);
    let a2 = g.abs(nx);
    assert_eq!(g.value(a1).data(), g.value(a2).data());
}

#[test]
fn batchnorm_standardizes_batch_statistics() {
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let x = Tensor::<f64>::rand_uniform(&[4, 3, 5, 5], -2.0, 3.0, &mut rng);
    let mut g = Graph::<f64>::new();
    let xn = g.constant(x);
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let bn = g.batchnorm2d_batch(xn, gamma, beta, 1e-5).unwrap();
    // Recompute moments of the output directly.
    let y = g.value(bn.y);
    let n = 4 * 5 * 5;
    for c in 0..3 {
        let mut mean = 0.0;
        let mut var = 0.0;
        for b in 0..4 {
            for p in 0..25 {
                mean += y.data()[(b * 3 + c) * 25 + p];
            }
        }
        mean /= n as f64;
        for b in 0..4 {
            for p in 0..25 {
                let d = y.data()[(b * 3 + c) * 25 + p] - mean;
                var += d * d;
            }
        }
        var /= n as f64;
        assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
    }
}

#[test]
fn backward_linear_example_and_blocked_path() {
    // y = w·x, seed 1 -> grad_w = x.
    let mut g = Graph::<f64>::new();
    let w = g.leaf(t(&[2, 1], &[0.5, -1.5]), true);
    let x = g.constant(t(&[1, 2], &[3.0, 4.0]));
    let y = g.linear(x, w, None).unwrap();
    let grads = g.backward(y, Tensor::full(&[1, 1], 1.0)).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0]);

    // loss = stop_gradient(w)·c -> grad_w = 0.
    let mut g = Graph::<f64>::new();
    let w = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
    let c = g.constant(t(&[3], &[5.0, 6.0, 7.0]));
    let wb = g.stop_gradient(w);
    let prod = g.mul(wb, c).unwrap();
    assert_eq!(g.value(prod).data(), &[5.0, 12.0, 21.0]);
    let s = g.sum_all(prod);
    let grads = g.backward(s, Tensor::scalar(1.0)).unwrap();
    assert!(grads.get(w).is_none(), "blocked path must contribute nothing");
}

#[test]
fn backward_composite_net_matches_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(21);
    let x = Tensor::rand_uniform(&[2, 1, 6, 6], 0.0, 1.0, &mut rng);
    let k = Tensor::rand_uniform(&[1, 3, 3, 3], -0.8, 0.8, &mut rng);
    let kb = Tensor::rand_uniform(&[3], -0.2, 0.2, &mut rng);
    let w = Tensor::rand_uniform(&[27, 2], -0.5, 0.5, &mut rng);
    let wb = Tensor::rand_uniform(&[2], -0.2, 0.2, &mut rng);
    let report = finite_difference_check(&[k, kb, w, wb], 1e-6, &|g, ids| {
        let xx = g.constant(x.clone());
        let c = g.conv2d(xx, ids[0], Some(ids[1]), 2, 1).unwrap();
        let r = g.relu(c);
        let f = g.reshape(r, &[2, 27]).unwrap();
        let l = g.linear(f, ids[2], Some(ids[3])).unwrap();
        let sq = g.mul(l, l).unwrap();
        g.sum_all(sq)
    });
    assert!(report.worst < 1e-5, "worst rel err {} {:?}", report.worst, report.failures);
}

#[test]
fn mixed_op_gradients_match_finite_differences() {
    // Covers div, sqrt, log, abs, clamp, variance, sum_dims, concat,
    // slice, repeat_rows and class_seeds in one composite graph.
    let mut rng = ChaCha12Rng::seed_from_u64(33);
    let a = Tensor::rand_uniform(&[2, 3, 2, 2], 0.3, 1.7, &mut rng);
    let b = Tensor::rand_uniform(&[2, 3, 2, 2], 0.5, 1.5, &mut rng);
    let report = finite_difference_check(&[a, b], 1e-6, &|g, ids| {
        let q = g.div(ids[0], ids[1]).unwrap();
        let sq = g.sqrt(q).unwrap();
        let lg = g.log(sq).unwrap();
        let ab = g.abs(lg);
        let cl = g.clamp(ab, 0.01, 10.0);
        let cat = g.concat_channels(&[cl, ids[0]]).unwrap();
        let sl = g.slice_channels(cat, 1, 5).unwrap();
        let rep = g.repeat_rows(sl, 2).unwrap();
        let sums = g.sum_dims(rep, &[2, 3]).unwrap();
        let seeds = g.class_seeds(sums).unwrap();
        let v = g.variance_all(seeds);
        let s = g.sum_all(seeds);
        let total = g.add(v, s).unwrap();
        g.mul_const(total, 0.5)
    });
    assert!(report.worst < 1e-5, "worst rel err {} {:?}", report.worst, report.failures);
}

#[test]
fn division_zero_conventions() {
    let mut g = Graph::<f64>::new();
    let num = g.constant(t(&[2], &[0.0, 1.0]));
    let den_ok = g.constant(t(&[2], &[0.0, 2.0]));
    // 0/0 = 0 by convention.
    let q = g.div(num, den_ok).unwrap();
    assert_eq!(g.value(q).data(), &[0.0, 0.5]);
    // Nonzero numerator over exact zero is a numeric-domain error.
    let den_bad = g.constant(t(&[2], &[1.0, 0.0]));
    let err = g.div(num, den_bad).unwrap_err();
    assert!(matches!(err, isnet_core::Error::Numeric { .. }));
}

#[test]
fn graph_backward_twice_is_reuse_error() {
    let mut g = Graph::<f64>::new();
    let w = g.leaf(t(&[2], &[1.0, 2.0]), true);
    let s = g.sum_all(w);
    g.backward(s, Tensor::scalar(1.0)).unwrap();
    let err = g.backward(s, Tensor::scalar(1.0)).unwrap_err();
    assert!(matches!(err, isnet_core::Error::GraphConsumed));
}

#[test]
fn backward_seed_shape_must_match_output() {
    let mut g = Graph::<f64>::new();
    let w = g.leaf(t(&[2], &[1.0, 2.0]), true);
    let y = g.mul_const(w, 2.0);
    let err = g.backward(y, Tensor::scalar(1.0)).unwrap_err();
    assert!(matches!(err, isnet_core::Error::Shape { .. }));
}

#[test]
fn stabilize_sign_convention_at_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[0.0, -1.0, 2.0]));
    let z = g.stabilize(x, 0.25);
    // sign(0) = +1.
    assert_eq!(g.value(z).data(), &[0.25, -1.25, 2.25]);
}

#[test]
fn determinism_bit_identical_backward() {
    let run = || -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let x = Tensor::<f64>::rand_uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut rng);
        let k = Tensor::<f64>::rand_uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.constant(x);
        let kn = g.leaf(k, true);
        let y = g.conv2d(xn, kn, None, 1, 1).unwrap();
        let r = g.relu(y);
        let s = g.sum_all(r);
        let grads = g.backward(s, Tensor::scalar(1.0)).unwrap();
        grads.get(kn).unwrap().data().to_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
}

#[test]
fn repeat_rows_layout_is_interleaved() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let r = g.repeat_rows(x, 3).unwrap();
    assert_eq!(g.value(r).shape(), &[6, 2]);
    assert_eq!(
        g.value(r).data(),
        &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]
    );
}

#[test]
fn class_seeds_diagonal_structure() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(t(&[1, 3], &[2.0, -1.0, 0.5]));
    let seeds = g.class_seeds(logits).unwrap();
    assert_eq!(g.value(seeds).shape(), &[3, 3]);
    assert_eq!(
        g.value(seeds).data(),
        &[2.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.5]
    );
}

#[test]
fn cross_entropy_matches_manual_computation() {
    let mut g = Graph::<f64>::new();
    let logits = g.leaf(t(&[2, 3], &[1.0, 2.0, 0.5, -1.0, 0.0, 3.0]), true);
    let l = g.cross_entropy_logits(logits, &[1, 2]).unwrap();
    let manual = |row: &[f64], y: usize| -> f64 {
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        lse - row[y]
    };
    let expect = (manual(&[1.0, 2.0, 0.5], 1) + manual(&[-1.0, 0.0, 3.0], 2)) / 2.0;
    assert!((g.value(l).item() - expect).abs() < 1e-12);
}
