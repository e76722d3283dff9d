use lipscope::attention::{AttentionKind, AttentionParams};
use lipscope::lab::{
    check_principles, compose_network_bound, droppath_bound, estimate_K, estimate_K_with,
    estimate_layerwise, estimate_prefixes, layer_bound_report, sandwich_check, AttentionTarget,
    DropPathMode, EstimateConfig, FnTarget, LayerTarget, Precision,
};
use lipscope::layers::{sample_input_shape, sample_layer, LayerKind, LayerSpec};
use lipscope::linalg::{DenseMatrix, ExtendedReal, NormKind};
use lipscope::network::{build, Block, Family, Network, NetworkSpec, Op, Shortcut, SubBlock};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    DenseMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

fn cfg(seed: u64) -> EstimateConfig {
    EstimateConfig {
        base_points: 4,
        perturbations: 6,
        epsilon: 1e-4,
        seed,
        ..Default::default()
    }
}

fn smooth_map(x: &DenseMatrix) -> DenseMatrix {
    x.map(|v| (1.3 * v).sin() + 0.2 * v * v)
}

/// Top right-singular vector by power iteration on `WᵀW`.
fn top_right_singular(w: &DenseMatrix) -> (f64, Vec<f64>) {
    let wtw = w.transpose().matmul(w).unwrap();
    let mut v = vec![1.0; w.cols()];
    for _ in 0..5000 {
        let next = wtw
            .matmul(&DenseMatrix::column_vector(&v))
            .unwrap()
            .into_data();
        let n = next.iter().map(|a| a * a).sum::<f64>().sqrt();
        v = next.into_iter().map(|a| a / n).collect();
    }
    let wv = w.matmul(&DenseMatrix::column_vector(&v)).unwrap();
    (wv.frobenius_norm(), v)
}

fn linear_net(ws: &[DenseMatrix], shortcut: Shortcut) -> Network {
    let blocks = ws
        .iter()
        .map(|w| Block {
            subs: vec![SubBlock {
                branch: vec![Op::Layer(
                    LayerSpec::linear(w.clone(), vec![0.0; w.rows()]).unwrap(),
                )],
                shortcut: shortcut.clone(),
                pre_norm: None,
                post_norm: None,
            }],
        })
        .collect();
    Network::from_blocks(blocks, (ws[0].cols(), 1)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn scale_covariance(k in -6i32..6, negative in any::<bool>(), seed in 0u64..1000) {
        let a = if negative { -(2f64.powi(k)) } else { 2f64.powi(k) };
        let f = FnTarget { shape: (3, 2), f: smooth_map };
        let g = FnTarget { shape: (3, 2), f: move |x: &DenseMatrix| smooth_map(x).scale(a) };
        let kf = estimate_K(&f, &cfg(seed)).unwrap().value;
        let kg = estimate_K(&g, &cfg(seed)).unwrap().value;
        prop_assert_eq!(kg, a.abs() * kf);
    }

    #[test]
    fn scale_covariance_general_factor(a in -50.0f64..50.0, seed in 0u64..1000) {
        let f = FnTarget { shape: (3, 2), f: smooth_map };
        let g = FnTarget { shape: (3, 2), f: move |x: &DenseMatrix| smooth_map(x).scale(a) };
        let kf = estimate_K(&f, &cfg(seed)).unwrap().value;
        let kg = estimate_K(&g, &cfg(seed)).unwrap().value;
        prop_assert!((kg - a.abs() * kf).abs() <= 1e-12 * kg.max(1.0));
    }

    #[test]
    fn translation_invariance(c in -8i32..8, seed in 0u64..1000) {
        // Outputs on a 2⁻²⁰ grid make adding a small integer exact, so the
        // differences, and hence K_s, must agree bit for bit.
        let quantized = |x: &DenseMatrix| smooth_map(x).map(|v| (v * 1048576.0).round() / 1048576.0);
        let shift = c as f64;
        let f = FnTarget { shape: (4, 1), f: quantized };
        let g = FnTarget { shape: (4, 1), f: move |x: &DenseMatrix| quantized(x).map(|v| v + shift) };
        let e = EstimateConfig { epsilon: 1e-2, ..cfg(seed) };
        prop_assert_eq!(estimate_K(&f, &e).unwrap().value, estimate_K(&g, &e).unwrap().value);
    }

    #[test]
    fn translation_invariance_general_offset(c in -100.0f64..100.0, seed in 0u64..1000) {
        let f = FnTarget { shape: (4, 1), f: smooth_map };
        let g = FnTarget { shape: (4, 1), f: move |x: &DenseMatrix| smooth_map(x).map(|v| v + c) };
        let e = EstimateConfig { epsilon: 1e-2, ..cfg(seed) };
        let (kf, kg) = (estimate_K(&f, &e).unwrap().value, estimate_K(&g, &e).unwrap().value);
        prop_assert!((kf - kg).abs() < 1e-10 * kf.max(1.0));
    }

    #[test]
    fn more_perturbations_never_lower_the_estimate(p in 1usize..12, norm in prop::sample::select(NormKind::ALL.to_vec()), seed in 0u64..1000) {
        let f = FnTarget { shape: (3, 3), f: smooth_map };
        let small = EstimateConfig { perturbations: p, norm, ..cfg(seed) };
        let large = EstimateConfig { perturbations: 2 * p, ..small };
        prop_assert!(estimate_K(&f, &large).unwrap().value >= estimate_K(&f, &small).unwrap().value);
    }

    #[test]
    fn sampled_below_bound_for_finite_layers(kind in prop::sample::select(LayerKind::ALL.to_vec()), seed in 0u64..1000) {
        let layer = sample_layer(kind, 6, seed).unwrap();
        let report = layer_bound_report(&layer);
        let shape = sample_input_shape(&layer, 6, 2);
        let est = estimate_K(&LayerTarget { layer: &layer, shape }, &cfg(seed)).unwrap();
        prop_assert!(sandwich_check(&est, &report));
    }

    #[test]
    fn layerwise_ratio_algebra(seed in 0u64..200) {
        let spec = NetworkSpec {
            depth: 3, width: 8, heads: 2, ffn_expand: 2, input_height: 2, input_width: 2,
            ..NetworkSpec::desk(Family::TransformerSCSA)
        };
        let net = build(&spec, seed).unwrap();
        let x = random_matrix(8, 4, seed);
        let prof = estimate_layerwise(&net, &x, 6, 1e-4, NormKind::L2, seed).unwrap();
        prop_assert_eq!(prof.k_l0.len(), 4);
        prop_assert_eq!(prof.k_ll[3], Some(1.0));
        prop_assert_eq!(prof.k_l0[0], 1.0);
        for l in 0..=3 {
            let through = prof.k_l0[l] * prof.k_ll[l].unwrap();
            prop_assert!(prof.k_l0[3] <= through * (1.0 + 1e-12));
        }
    }

    #[test]
    fn prefixes_match_standalone_estimates(seed in 0u64..100) {
        let spec = NetworkSpec {
            depth: 3, width: 8, heads: 2, ffn_expand: 2, input_height: 2, input_width: 2,
            ..NetworkSpec::desk(Family::TransformerDPA)
        };
        let net = build(&spec, seed).unwrap();
        let c = cfg(seed);
        let all = estimate_prefixes(&net, &[1, 2, 3], &NormKind::ALL, &c).unwrap();
        for (k, depth) in [1usize, 2, 3].into_iter().enumerate() {
            let prefix = Network::from_blocks(net.blocks[..depth].to_vec(), net.input_shape).unwrap();
            for (m, norm) in NormKind::ALL.into_iter().enumerate() {
                let e = estimate_K(&prefix, &EstimateConfig { norm, ..c }).unwrap();
                prop_assert_eq!(all[k][m].value, e.value);
            }
        }
    }
}

#[test]
fn constant_map_has_zero_slope() {
    let f = FnTarget {
        shape: (3, 2),
        f: |_: &DenseMatrix| DenseMatrix::from_fn(3, 2, |i, j| (i + j) as f64),
    };
    assert_eq!(estimate_K(&f, &cfg(0)).unwrap().value, 0.0);
}

#[test]
fn doubling_is_exact_for_every_sample() {
    let f = FnTarget {
        shape: (4, 3),
        f: |x: &DenseMatrix| x.scale(2.0),
    };
    for norm in NormKind::ALL {
        let e = estimate_K(&f, &EstimateConfig { norm, ..cfg(3) }).unwrap();
        assert_eq!(e.value, 2.0);
    }
}

#[test]
fn linear_map_reaches_spectral_norm_along_top_direction() {
    let w = random_matrix(5, 5, 42);
    let (sigma, v) = top_right_singular(&w);
    let layer = LayerSpec::linear(w, vec![0.0; 5]).unwrap();
    let target = LayerTarget {
        layer: &layer,
        shape: (5, 1),
    };
    let free = estimate_K(&target, &cfg(1)).unwrap().value;
    assert!(free <= sigma + 1e-12);
    let e = EstimateConfig {
        epsilon: 1.0,
        ..cfg(1)
    };
    let aligned = estimate_K_with(&target, &e, None, Some(&[DenseMatrix::column_vector(&v)]))
        .unwrap()
        .value;
    assert!((aligned - sigma).abs() < 1e-9, "{aligned} vs {sigma}");
}

#[test]
fn sandwich_examples() {
    let w = random_matrix(6, 6, 3);
    let lin = LayerSpec::linear(w, vec![0.1; 6]).unwrap();
    let est = estimate_K(
        &LayerTarget {
            layer: &lin,
            shape: (6, 2),
        },
        &cfg(2),
    )
    .unwrap();
    assert!(sandwich_check(&est, &layer_bound_report(&lin)));

    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut g = || DenseMatrix::from_fn(16, 16, |_, _| r.random_range(-0.4..0.4));
    let scsa = AttentionParams::new(AttentionKind::SCSA, g(), g(), g(), 2).unwrap();
    let dpa = AttentionParams::new(AttentionKind::DPA, g(), g(), g(), 2).unwrap();
    for p in [scsa, dpa] {
        let net = Network::from_blocks(
            vec![Block {
                subs: vec![SubBlock::plain(vec![Op::Attention(p.clone())])],
            }],
            (16, 8),
        )
        .unwrap();
        let report = compose_network_bound(&net).unwrap();
        let est = estimate_K(
            &AttentionTarget {
                params: &p,
                tokens: 8,
            },
            &cfg(4),
        )
        .unwrap();
        assert!(sandwich_check(&est, &report), "{:?}", p.kind);
        assert_eq!(report.product.is_finite(), p.kind == AttentionKind::SCSA);
    }
}

#[test]
fn composed_bound_examples() {
    let i = DenseMatrix::identity(3);
    let block = |scale: f64| Block {
        subs: vec![SubBlock {
            branch: vec![Op::Layer(
                LayerSpec::linear(i.scale(scale), vec![0.0; 3]).unwrap(),
            )],
            shortcut: Shortcut::Plain,
            pre_norm: None,
            post_norm: None,
        }],
    };
    // Two transformer-like blocks, each (1 + Lip SA)(1 + Lip FFN) with unit
    // branch bounds, followed by a head with σ_max = 2.
    let layer = Block {
        subs: vec![block(1.0).subs[0].clone(), block(1.0).subs[0].clone()],
    };
    let head = Block {
        subs: vec![SubBlock::plain(vec![Op::Layer(
            LayerSpec::linear(i.scale(2.0), vec![0.0; 3]).unwrap(),
        )])],
    };
    let net = Network::from_blocks(vec![layer.clone(), layer, head], (3, 1)).unwrap();
    let report = compose_network_bound(&net).unwrap();
    assert!((report.product.to_f64() - 32.0).abs() < 1e-9);
    let recomputed: ExtendedReal = report.per_layer.iter().copied().product();
    assert_eq!(recomputed, report.product);

    let zero = linear_net(
        &[DenseMatrix::zeros(3, 3), DenseMatrix::zeros(3, 3)],
        Shortcut::Plain,
    );
    assert_eq!(
        compose_network_bound(&zero).unwrap().product,
        ExtendedReal::ONE
    );

    let dpa = build(
        &NetworkSpec {
            depth: 2,
            width: 8,
            heads: 2,
            input_height: 2,
            input_width: 2,
            ..NetworkSpec::desk(Family::TransformerDPA)
        },
        0,
    )
    .unwrap();
    assert_eq!(
        compose_network_bound(&dpa).unwrap().product,
        ExtendedReal::Infinite
    );
}

#[test]
fn droppath_bound_examples() {
    let ws: Vec<DenseMatrix> = (0..4).map(|_| DenseMatrix::identity(3)).collect();
    let net = linear_net(&ws, Shortcut::Plain);
    let report = compose_network_bound(&net).unwrap();
    assert_eq!(report.product, ExtendedReal::Finite(16.0));
    for seed in 0..20 {
        assert_eq!(
            droppath_bound(&report, 1.0, DropPathMode::Sampled, seed).unwrap(),
            ExtendedReal::ONE
        );
        assert_eq!(
            droppath_bound(&report, 0.0, DropPathMode::Sampled, seed).unwrap(),
            report.product
        );
    }
    assert_eq!(
        droppath_bound(&report, 0.7, DropPathMode::Deterministic, 0).unwrap(),
        report.product
    );
    let mean = (0..10_000u64)
        .map(|s| {
            droppath_bound(&report, 0.5, DropPathMode::Sampled, s)
                .unwrap()
                .to_f64()
        })
        .sum::<f64>()
        / 10_000.0;
    let want = 1.5f64.powi(4);
    assert!((mean - want).abs() < 0.05 * want, "{mean} vs {want}");
    assert!(droppath_bound(&report, 1.5, DropPathMode::Sampled, 0).is_err());
}

#[test]
fn principles_examples() {
    let small = linear_net(&[random_matrix(4, 4, 1).scale(0.1)], Shortcut::Plain);
    let x = random_matrix(4, 1, 2);
    let r = check_principles(&small, &x, Precision::FP32).unwrap();
    assert!(r.violations.is_empty() && r.backward_checked);

    let constant = linear_net(&[DenseMatrix::zeros(4, 4)], Shortcut::None);
    let r = check_principles(&constant, &x, Precision::FP16).unwrap();
    assert_eq!(r.max_abs_gradient, vec![0.0]);
    assert!(r.backward_violations.is_empty());

    let big = linear_net(&[DenseMatrix::identity(4).scale(1e5)], Shortcut::None);
    let r = check_principles(
        &big,
        &DenseMatrix::column_vector(&[1.0; 4]),
        Precision::FP16,
    )
    .unwrap();
    assert_eq!(r.forward_violations, vec![1]);
    assert_eq!(r.backward_violations, vec![1]);
    let r = check_principles(
        &big,
        &DenseMatrix::column_vector(&[1.0; 4]),
        Precision::FP32,
    )
    .unwrap();
    assert!(r.violations.is_empty());
}

#[test]
fn deep_unnormalized_dpa_breaks_half_precision() {
    let spec = NetworkSpec {
        depth: 16,
        use_norm: false,
        ..NetworkSpec::desk(Family::TransformerDPA)
    };
    let net = build(&spec, 0).unwrap();
    let x = lipscope::lab::base_point(0, 0, spec.input_shape());
    let r = check_principles(&net, &x, Precision::FP16).unwrap();
    assert!(!r.forward_violations.is_empty());
}

#[test]
fn overflowing_target_reports_infinity() {
    let f = FnTarget {
        shape: (2, 1),
        f: |x: &DenseMatrix| x.map(|v| if v > 0.5 { f64::NAN } else { v }),
    };
    let e = estimate_K(&f, &cfg(0)).unwrap();
    assert!(e.overflow && e.value == f64::INFINITY);
}

#[test]
fn report_json_uses_field_names() {
    let f = FnTarget {
        shape: (2, 1),
        f: |x: &DenseMatrix| x.scale(3.0),
    };
    let e = estimate_K(&f, &cfg(0)).unwrap();
    let v: serde_json::Value = serde_json::to_value(&e).unwrap();
    for key in [
        "value",
        "norm",
        "epsilon",
        "num_base_points",
        "num_perturbations",
        "seed",
        "argmax_sample",
        "overflow",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    let back: lipscope::lab::LipschitzEstimate = serde_json::from_value(v).unwrap();
    assert_eq!(back, e);
}
