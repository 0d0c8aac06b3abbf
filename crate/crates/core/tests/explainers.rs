mod common;

use common::{affine_net, normal_vec, random_net, test_rng};
use proptest::prelude::*;
use rand::Rng;
use xstab_core::explain::{
    explain, kernel_shap, lime, saliency, smoothgrad, top_k_values, ExplainerSpec, LimeConfig, Method,
};
use xstab_core::nn::{ActivationSpec, MlpParams};

#[test]
fn saliency_is_the_input_gradient() {
    let mut rng = test_rng(1);
    let net = random_net(&mut rng, 6, &[8, 4], ActivationSpec::softplus(3.0), 1.0);
    let x = normal_vec(&mut rng, 6, 1.0);
    assert_eq!(saliency(&net, &x).unwrap().values, net.input_gradient(&x).unwrap());
    let zero = MlpParams::zeros(6, &[8], ActivationSpec::relu()).unwrap();
    assert!(saliency(&zero, &x).unwrap().values.iter().all(|&v| v == 0.0));
}

#[test]
fn lime_recovers_affine_models() {
    let mut rng = test_rng(2);
    for t in 0..50 {
        let d = 2 + t % 12;
        let w = normal_vec(&mut rng, d, 1.0);
        let net = affine_net(&w, rng.random_range(-1.0..1.0));
        let x = normal_vec(&mut rng, d, 1.0);
        let cfg = LimeConfig {
            n_samples: 2000,
            ridge_lambda: 1e-8,
            ..LimeConfig::default()
        };
        let a = lime(&net, &x, &cfg, t as u64).unwrap();
        for (got, want) in a.values.iter().zip(&w) {
            assert!((got - want).abs() < 1e-6, "model {t}: {got} vs {want}");
        }
    }
}

#[test]
fn kernel_shap_recovers_affine_models() {
    let mut rng = test_rng(3);
    for t in 0..50 {
        // d ≤ 10 enumerates every coalition; larger d samples
        let d = 2 + t % 13;
        let w = normal_vec(&mut rng, d, 1.0);
        let net = affine_net(&w, rng.random_range(-1.0..1.0));
        let x = normal_vec(&mut rng, d, 1.0);
        let bg = normal_vec(&mut rng, d, 0.3);
        let a = kernel_shap(&net, &x, &bg, 2 * d + 2048, 1e-8, t as u64).unwrap();
        for i in 0..d {
            let want = w[i] * (x[i] - bg[i]);
            assert!((a.values[i] - want).abs() < 1e-6, "model {t}, feature {i}");
        }
    }
}

fn exact_shapley(net: &MlpParams, x: &[f64], bg: &[f64]) -> Vec<f64> {
    let d = x.len();
    let fact = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
    let value = |mask: usize| {
        let z: Vec<f64> = (0..d).map(|i| if mask >> i & 1 == 1 { x[i] } else { bg[i] }).collect();
        net.forward(&z).unwrap()
    };
    let mut phi = vec![0.0; d];
    for (i, p) in phi.iter_mut().enumerate() {
        for mask in 0..(1usize << d) {
            if mask >> i & 1 == 1 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let w = fact(s) * fact(d - s - 1) / fact(d);
            *p += w * (value(mask | 1 << i) - value(mask));
        }
    }
    phi
}

#[test]
fn kernel_shap_with_all_coalitions_is_exact() {
    let mut rng = test_rng(4);
    for t in 0..20 {
        let d = 2 + t % 7;
        let net = random_net(&mut rng, d, &[6], ActivationSpec::softplus(2.0), 1.0);
        let x = normal_vec(&mut rng, d, 1.0);
        let bg = normal_vec(&mut rng, d, 0.5);
        let a = kernel_shap(&net, &x, &bg, 1 << d, 1e-12, 0).unwrap();
        let want = exact_shapley(&net, &x, &bg);
        for (g, w) in a.values.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "net {t}: {g} vs {w}");
        }
    }
}

#[test]
fn smoothgrad_matches_independent_monte_carlo() {
    let mut rng = test_rng(5);
    let net = random_net(&mut rng, 4, &[10], ActivationSpec::softplus(1.0), 1.5);
    let x = normal_vec(&mut rng, 4, 1.0);
    let (sigma, n) = (0.5, 10_000);
    let est = smoothgrad(&net, &x, sigma, n, 17).unwrap().values;

    let mut oracle_rng = test_rng(1234);
    let mut sum = [0.0; 4];
    let mut sum_sq = [0.0; 4];
    for _ in 0..n {
        let z: Vec<f64> = x.iter().zip(normal_vec(&mut oracle_rng, 4, sigma)).map(|(a, e)| a + e).collect();
        for (i, g) in net.input_gradient(&z).unwrap().into_iter().enumerate() {
            sum[i] += g;
            sum_sq[i] += g * g;
        }
    }
    for i in 0..4 {
        let mean = sum[i] / n as f64;
        let var = sum_sq[i] / n as f64 - mean * mean;
        // both estimates carry the same sampling variance
        let se = (2.0 * var / n as f64).sqrt();
        assert!((est[i] - mean).abs() < 3.0 * se, "coord {i}: {} vs {mean} (se {se})", est[i]);
    }
}

#[test]
fn explainers_are_deterministic_given_seed() {
    let mut rng = test_rng(6);
    let net = random_net(&mut rng, 5, &[7], ActivationSpec::softplus(5.0), 1.0);
    let x = normal_vec(&mut rng, 5, 1.0);
    let bg = vec![0.0; 5];
    for m in [Method::Saliency, Method::SmoothGrad, Method::Lime, Method::KernelShap] {
        let spec = ExplainerSpec::default_for(m);
        let a = explain(&net, &x, &spec, 42, Some(&bg)).unwrap();
        let b = explain(&net, &x, &spec, 42, Some(&bg)).unwrap();
        assert_eq!(a, b, "{m:?}");
        assert_eq!(a.method, m);
        assert!(a.values.iter().all(|v| v.is_finite()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_shap_efficiency(seed in any::<u64>(), d in 2usize..16, budget in 0usize..300) {
        let mut rng = test_rng(seed);
        let net = random_net(&mut rng, d, &[5], ActivationSpec::softplus(2.0), 1.0);
        let x = normal_vec(&mut rng, d, 1.0);
        let bg = normal_vec(&mut rng, d, 1.0);
        let a = kernel_shap(&net, &x, &bg, d + 2 + budget, 1e-8, seed).unwrap();
        let gap = net.forward(&x).unwrap() - net.forward(&bg).unwrap();
        prop_assert!((a.values.iter().sum::<f64>() - gap).abs() < 1e-9);
    }

    #[test]
    fn top_k_is_permutation_equivariant(
        values in prop::collection::vec(-10f64..10.0, 1..20),
        seed in any::<u64>(),
        k_frac in 0.0f64..1.0,
    ) {
        use rand::seq::SliceRandom;
        let d = values.len();
        let k = 1 + ((d - 1) as f64 * k_frac) as usize;
        let mut perm: Vec<usize> = (0..d).collect();
        perm.shuffle(&mut test_rng(seed));
        // feature i moves to position perm[i]
        let mut permuted = vec![0.0; d];
        for i in 0..d {
            permuted[perm[i]] = values[i];
        }
        let a = top_k_values(&values, k).unwrap();
        let b = top_k_values(&permuted, k).unwrap();
        let mapped: Vec<(usize, i8)> = a.entries.iter().map(|&(i, s)| (perm[i], s)).collect();
        // ties can reorder under permutation, so compare as multisets of
        // (magnitude, sign) plus membership when magnitudes are distinct
        let mut ma: Vec<_> = mapped.iter().map(|&(i, s)| (permuted[i].abs().to_bits(), s)).collect();
        let mut mb: Vec<_> = b.entries.iter().map(|&(i, s)| (permuted[i].abs().to_bits(), s)).collect();
        ma.sort();
        mb.sort();
        prop_assert_eq!(ma, mb);
        let mut sorted: Vec<f64> = values.iter().map(|v| v.abs()).collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let unique = sorted.windows(2).all(|w| w[0] != w[1]);
        if unique {
            prop_assert_eq!(mapped, b.entries);
        }
    }
}
