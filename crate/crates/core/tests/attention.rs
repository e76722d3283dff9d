use lipscope::attention::{
    attn_bound_caveats, attn_forward, attn_jvp_numeric, attn_lip_bound, attn_probabilities,
    phi_inverse, AttentionKind, AttentionParams,
};
use lipscope::lab::{estimate_K, AttentionTarget, EstimateConfig};
use lipscope::layers::Caveat;
use lipscope::linalg::{DenseMatrix, ExtendedReal};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KINDS: [AttentionKind; 3] = [AttentionKind::DPA, AttentionKind::L2A, AttentionKind::SCSA];

fn uniform(rows: usize, cols: usize, scale: f64, r: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0) * scale)
}

fn params(kind: AttentionKind, d: usize, heads: usize, gain: f64, seed: u64) -> AttentionParams {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let s = gain * (3.0 / d as f64).sqrt();
    let wq = uniform(d, d, s, &mut r);
    let wk = if kind == AttentionKind::L2A {
        wq.clone()
    } else {
        uniform(d, d, s, &mut r)
    };
    let wv = uniform(d, d, s, &mut r);
    AttentionParams::new(kind, wq, wk, wv, heads).unwrap()
}

/// Straightforward single-head dot-product attention: `V·softmax_col(QᵀK/√d)`.
fn dpa_oracle(p: &AttentionParams, x: &DenseMatrix) -> DenseMatrix {
    let q = p.w_q.matmul(x).unwrap();
    let k = p.w_k.matmul(x).unwrap();
    let v = p.w_v.matmul(x).unwrap();
    let n = x.cols();
    let d = q.rows() as f64;
    let mut prob = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                (0..q.rows())
                    .map(|r| q.get(r, i) * k.get(r, j))
                    .sum::<f64>()
                    / d.sqrt()
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for i in 0..n {
            prob.set(i, j, e[i] / z);
        }
    }
    v.matmul(&prob).unwrap()
}

fn permute_columns(x: &DenseMatrix, perm: &[usize]) -> DenseMatrix {
    DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, perm[j]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn probabilities_are_column_stochastic(
        kind in prop::sample::select(KINDS.to_vec()),
        n in 1usize..9,
        gain in 0.1f64..8.0,
        seed in 0u64..1000,
    ) {
        let p = params(kind, 8, 2, gain, seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
        let x = uniform(8, n, 2.0, &mut r);
        for prob in attn_probabilities(&p, &x).unwrap() {
            for j in 0..n {
                let s: f64 = prob.column(j).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn permutation_equivariant(
        kind in prop::sample::select(KINDS.to_vec()),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
        seed in 0u64..1000,
    ) {
        let p = params(kind, 8, 2, 1.0, seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed + 7);
        let x = uniform(8, 6, 1.5, &mut r);
        let y = attn_forward(&p, &x).unwrap().output;
        let yp = attn_forward(&p, &permute_columns(&x, &perm)).unwrap().output;
        prop_assert!(yp.sub(&permute_columns(&y, &perm)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn dpa_matches_reference(n in 1usize..7, seed in 0u64..1000) {
        let p = params(AttentionKind::DPA, 6, 1, 1.0, seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed + 3);
        let x = uniform(6, n, 2.0, &mut r);
        let got = attn_forward(&p, &x).unwrap().output;
        prop_assert!(got.sub(&dpa_oracle(&p, &x)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn scsa_head_outputs_bounded_by_nu(n in 1usize..9, nu in 0.1f64..4.0, seed in 0u64..1000) {
        let mut p = params(AttentionKind::SCSA, 8, 2, 3.0, seed);
        p.nu = nu;
        let mut r = ChaCha8Rng::seed_from_u64(seed + 5);
        let x = uniform(8, n, 5.0, &mut r);
        let y = attn_forward(&p, &x).unwrap().output;
        for h in 0..2 {
            let block = y.row_block(4 * h, 4 * h + 4);
            for j in 0..n {
                let norm = block.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(norm <= nu * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn phi_inverse_inverts(x in 1e-6f64..40.0) {
        let y = x * (x + 1.0).exp();
        prop_assert!((phi_inverse(y).unwrap() - x).abs() < 1e-8 * x.max(1.0));
    }
}

#[test]
fn single_token_returns_projected_value() {
    for kind in KINDS {
        let p = params(kind, 6, 2, 1.0, 3);
        let x = DenseMatrix::column_vector(&[0.3, -1.0, 0.2, 0.7, 1.1, -0.4]);
        let y = attn_forward(&p, &x).unwrap().output;
        let mut v = p.w_v.matmul(&x).unwrap();
        if kind == AttentionKind::SCSA {
            for h in 0..2 {
                let blk = v.row_block(3 * h, 3 * h + 3);
                let norm = (blk.frobenius_norm().powi(2) + p.eps).sqrt();
                for r in 3 * h..3 * h + 3 {
                    v.set(r, 0, v.get(r, 0) * p.nu / norm);
                }
            }
        }
        assert!(y.sub(&v).unwrap().max_abs() < 1e-12, "{kind:?}");
    }
}

#[test]
fn large_scsa_epsilon_gives_uniform_attention() {
    let mut p = params(AttentionKind::SCSA, 4, 1, 1.0, 8);
    p.eps = 1e12;
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let x = uniform(4, 5, 1.0, &mut r);
    let prob = &attn_probabilities(&p, &x).unwrap()[0];
    assert!(prob.data().iter().all(|v| (v - 0.2).abs() < 1e-6));
}

#[test]
fn sharp_dpa_still_normalizes() {
    let i = DenseMatrix::identity(2);
    let p = AttentionParams::new(AttentionKind::DPA, i.clone(), i.clone(), i, 1).unwrap();
    let x = DenseMatrix::from_rows(&[[10.0, 0.0], [0.0, 10.0]]);
    let prob = &attn_probabilities(&p, &x).unwrap()[0];
    for j in 0..2 {
        assert!((prob.column(j).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(prob.get(0, 0) > 0.999);
}

#[test]
fn bound_examples() {
    let i = DenseMatrix::identity(2);
    let mut scsa =
        AttentionParams::new(AttentionKind::SCSA, i.clone(), i.clone(), i.clone(), 1).unwrap();
    scsa.nu = 1.0;
    scsa.tau = 1.0;
    scsa.eps = 1.0;
    let b = attn_lip_bound(&scsa, 2).unwrap().to_f64();
    assert!((b - 10.0).abs() < 1e-9, "{b}");

    let dpa = params(AttentionKind::DPA, 4, 1, 1.0, 1);
    assert_eq!(attn_lip_bound(&dpa, 3).unwrap(), ExtendedReal::Infinite);
    assert!(attn_bound_caveats(&dpa).contains(&Caveat::DotProductAttention));

    let mut l2a = params(AttentionKind::L2A, 4, 1, 1.0, 1);
    assert!(attn_lip_bound(&l2a, 3).unwrap().is_finite());
    l2a.w_k = l2a.w_k.scale(1.5);
    assert_eq!(attn_lip_bound(&l2a, 3).unwrap(), ExtendedReal::Infinite);
}

#[test]
fn jvp_examples() {
    let p = params(AttentionKind::DPA, 4, 1, 1.0, 4);
    let x = DenseMatrix::column_vector(&[0.1, 0.2, -0.3, 0.4]);
    let zero = attn_jvp_numeric(&p, &x, &DenseMatrix::zeros(4, 1), 1e-5).unwrap();
    assert_eq!(zero.max_abs(), 0.0);
    // One token: the map is X ↦ W_V X.
    let z = DenseMatrix::column_vector(&[1.0, -2.0, 0.5, 0.0]);
    let jvp = attn_jvp_numeric(&p, &x, &z, 1e-5).unwrap();
    let want = p.w_v.matmul(&z).unwrap();
    assert!(jvp.sub(&want).unwrap().max_abs() < 1e-6);
}

#[test]
fn scsa_sampled_slope_below_bound() {
    for (d, n, seed) in [(16, 8, 1u64), (32, 16, 2), (64, 32, 3)] {
        let p = params(AttentionKind::SCSA, d, 4, 2.0, seed);
        let cfg = EstimateConfig {
            base_points: 20,
            perturbations: 50,
            epsilon: 1e-4,
            seed,
            ..Default::default()
        };
        let ks = estimate_K(
            &AttentionTarget {
                params: &p,
                tokens: n,
            },
            &cfg,
        )
        .unwrap()
        .value;
        let ku = attn_lip_bound(&p, n).unwrap().to_f64();
        assert!(ks <= ku + 1e-6, "d={d}: {ks} > {ku}");
    }
}

#[test]
fn dpa_slope_grows_with_query_key_gain() {
    let base = params(AttentionKind::DPA, 16, 2, 1.0, 11);
    let cfg = EstimateConfig {
        base_points: 5,
        perturbations: 5,
        epsilon: 1e-6,
        seed: 4,
        ..Default::default()
    };
    let mut last = 0.0;
    for g in [0.5, 1.0, 2.0, 4.0] {
        let mut p = base.clone();
        p.w_q = base.w_q.scale(g);
        p.w_k = base.w_k.scale(g);
        let k = estimate_K(
            &AttentionTarget {
                params: &p,
                tokens: 16,
            },
            &cfg,
        )
        .unwrap()
        .value;
        assert!(k >= last, "gain {g}: {k} < {last}");
        last = k;
    }
}

#[test]
fn shape_and_parameter_errors() {
    let p = params(AttentionKind::DPA, 4, 2, 1.0, 0);
    assert!(attn_forward(&p, &DenseMatrix::zeros(3, 2)).is_err());
    let i = DenseMatrix::identity(4);
    assert!(AttentionParams::new(AttentionKind::DPA, i.clone(), i.clone(), i, 3).is_err());
}
