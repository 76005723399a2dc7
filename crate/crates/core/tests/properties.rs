mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snnconv::balance::{balance, clipify, BalanceConfig};
use snnconv::diagnostics::error_bound;
use snnconv::forward::forward_ann;
use snnconv::graph::{ActivationMode, Conv2d, LayerSpec};
use snnconv::ops::relu;
use snnconv::pipeline::prepare;
use snnconv::spectral::{conv_operator_norm, conv_reshaped_norm, spectral_norm, NormVariant};
use snnconv::transform::{fold_batchnorm, rewrite_preneuron_maxpool};

fn rel_close(a: f32, b: f32, tol: f32) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn folding_batchnorm_keeps_outputs(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_convnet(&mut rng, 2, 5);
        let folded = fold_batchnorm(&g).unwrap();
        prop_assert!(folded.layers.iter().all(|l| !matches!(l, LayerSpec::BatchNorm(_))));
        let x = random_tensor(&mut rng, vec![4, 2, 8, 8], -1.0, 1.0);
        let a = forward_ann(&g, &x).unwrap();
        let b = forward_ann(&folded, &x).unwrap();
        for (u, v) in a.output().data().iter().zip(b.output().data()) {
            prop_assert!(rel_close(*u, *v, 1e-5), "{u} vs {v}");
        }
    }

    #[test]
    fn pool_rewrite_is_exact(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = fold_batchnorm(&random_convnet(&mut rng, 1, 3)).unwrap();
        let r = rewrite_preneuron_maxpool(&g).unwrap();
        let x = random_tensor(&mut rng, vec![8, 1, 8, 8], -2.0, 2.0);
        let (a, b) = (forward_ann(&g, &x).unwrap(), forward_ann(&r, &x).unwrap());
        prop_assert_eq!(a.output(), b.output());
    }

    #[test]
    fn relu_is_one_lipschitz(pairs in proptest::collection::vec((-5.0f32..5.0, -5.0f32..5.0), 1..64)) {
        let lhs: f64 = pairs.iter().map(|&(a, b)| ((relu(a) - relu(b)) as f64).powi(2)).sum();
        let rhs: f64 = pairs.iter().map(|&(a, b)| ((a - b) as f64).powi(2)).sum();
        prop_assert!(lhs.sqrt() <= rhs.sqrt());
    }

    #[test]
    fn spectral_norm_matches_svd(rows in 1usize..24, cols in 1usize..24, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wide: Vec<f64> = m.iter().map(|&v| v as f64).collect();
        let want = svd_max(&wide, rows, cols);
        let got = spectral_norm(&m, rows, cols, 20_000, 1e-13);
        prop_assert!((got - want).abs() <= 1e-6 * want.max(1e-12), "{got} vs {want}");
    }
}

#[test]
fn conv_operator_norm_within_overlap_of_reshaped() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (k, s, p) in [(3, 1, 1), (3, 2, 0), (1, 1, 0), (2, 2, 0)] {
        let LayerSpec::Conv2d(c) = random_conv(&mut rng, 3, 4, k, s, p) else {
            unreachable!()
        };
        let op = conv_operator_norm(&c, &[3, 6, 6]);
        let reshaped = conv_reshaped_norm(&c);
        // the operator norm can exceed the reshaped one by at most the overlap factor
        let overlap = ((k.div_ceil(s)) * (k.div_ceil(s))) as f64;
        assert!(
            op <= reshaped * overlap.sqrt() * (1.0 + 1e-6),
            "{op} {reshaped}"
        );
        assert!(op > 0.0);
    }
}

#[test]
fn one_by_one_conv_norm_equals_channel_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random_tensor(&mut rng, vec![5, 3, 1, 1], -1.0, 1.0);
    let c = Conv2d {
        in_channels: 3,
        out_channels: 5,
        kernel: [1, 1],
        stride: [1, 1],
        padding: [0, 0],
        weight: w.clone(),
        bias: None,
    };
    let want = svd_max(
        &w.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
        5,
        3,
    );
    assert!((conv_operator_norm(&c, &[3, 4, 4]) - want).abs() < 1e-6 * want);
    assert!((conv_reshaped_norm(&c) - want).abs() < 1e-6 * want);
}

/// The layer-by-layer bound also holds on networks with pooling, batch norm
/// and residual joins.
#[test]
fn bound_holds_on_residual_convnets() {
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = prepare(&random_convnet(&mut rng, 1, 4)).unwrap();
        let clipped = clipify(&g).unwrap();
        let data: Vec<_> = (0..4)
            .map(|_| random_tensor(&mut rng, vec![16, 1, 8, 8], -1.0, 1.0))
            .collect();
        let cfg = BalanceConfig {
            iterations: 60,
            ..Default::default()
        };
        let (mut snn, _) = balance(&clipped, data.clone(), &cfg).unwrap();
        snn.activation_mode = ActivationMode::If;
        let r = error_bound(&snn, &data[0], 48, NormVariant::Operator).unwrap();
        assert!(
            r.e_model <= r.bound,
            "seed {seed}: {} > {}",
            r.e_model,
            r.bound
        );
        for l in &r.layers {
            assert!(l.measured >= 0.0 && l.epsilon.is_none_or(|e| e >= 0.0));
        }
    }
}
