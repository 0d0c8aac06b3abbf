mod common;

use common::{normal_vec, random_net, test_rng};
use proptest::prelude::*;
use rand::Rng;
use xstab_core::data::Dataset;
use xstab_core::explain::{top_k, Attribution, Method};
use xstab_core::nn::{ActivationSpec, MlpParams};
use xstab_core::stability::{cdc, gradient_distance, pair_scores, param_distance, sa, ssa};

fn attr(values: Vec<f64>) -> Attribution {
    Attribution {
        values,
        method: Method::Saliency,
        input_id: 0,
    }
}

/// Attributions with frequent sign and magnitude collisions.
fn coarse_attr(rng: &mut impl Rng, d: usize) -> Attribution {
    attr((0..d).map(|_| f64::from(rng.random_range(-3i32..=3)) * 0.5).collect())
}

#[test]
fn ssa_implies_sa_and_cdc() {
    let mut rng = test_rng(1);
    let mut ssa_hits = 0;
    for t in 0..10_000 {
        let d = 5 + t % 4;
        let k = if t % 2 == 0 { 3 } else { 5 };
        let a = coarse_attr(&mut rng, d);
        // bias toward agreement so SSA = 1 occurs often
        let b = if t % 3 == 0 {
            attr(a.values.iter().map(|v| v * rng.random_range(0.9..1.1)).collect())
        } else {
            coarse_attr(&mut rng, d)
        };
        let s = pair_scores(&a, &b, k).unwrap();
        if s.ssa == 1 {
            ssa_hits += 1;
            assert_eq!(s.sa, 1.0);
            assert_eq!(s.cdc, 1);
        }
    }
    assert!(ssa_hits > 100);
}

proptest! {
    #[test]
    fn metrics_are_symmetric(seed in any::<u64>(), d in 3usize..10, k in 1usize..4) {
        let mut rng = test_rng(seed);
        let a = coarse_attr(&mut rng, d);
        let b = coarse_attr(&mut rng, d);
        let (ta, tb) = (top_k(&a, k).unwrap(), top_k(&b, k).unwrap());
        prop_assert_eq!(sa(&ta, &tb).unwrap(), sa(&tb, &ta).unwrap());
        prop_assert_eq!(ssa(&ta, &tb).unwrap(), ssa(&tb, &ta).unwrap());
        prop_assert_eq!(cdc(&a, &b, k).unwrap(), cdc(&b, &a, k).unwrap());
    }

    #[test]
    fn metrics_ignore_common_positive_scale(
        seed in any::<u64>(),
        d in 3usize..10,
        k in 1usize..4,
        c in prop_oneof![1e-3f64..1.0, 1.0f64..1e3],
    ) {
        let mut rng = test_rng(seed);
        let a = attr(normal_vec(&mut rng, d, 1.0));
        let b = attr(normal_vec(&mut rng, d, 1.0));
        let scale = |x: &Attribution| attr(x.values.iter().map(|v| v * c).collect());
        prop_assert_eq!(pair_scores(&a, &b, k).unwrap(), pair_scores(&scale(&a), &scale(&b), k).unwrap());
    }
}

fn flat_distance_by_layers(a: &MlpParams, b: &MlpParams) -> f64 {
    // biases first, then weights, accumulated per layer in reverse
    let mut s = 0.0;
    for (la, lb) in a.layers().iter().zip(b.layers()).rev() {
        for (x, y) in la.b.iter().zip(&lb.b) {
            s += (x - y) * (x - y);
        }
        for (x, y) in la.w.iter().zip(&lb.w) {
            s += (x - y) * (x - y);
        }
    }
    s.sqrt()
}

#[test]
fn param_distance_is_order_free() {
    let mut rng = test_rng(2);
    for _ in 0..50 {
        let a = random_net(&mut rng, 5, &[7, 3], ActivationSpec::relu(), 1.0);
        let b = random_net(&mut rng, 5, &[7, 3], ActivationSpec::relu(), 1.0);
        assert!((param_distance(&a, &b).unwrap() - flat_distance_by_layers(&a, &b)).abs() < 1e-12);
    }
}

#[test]
fn gradient_distance_matches_manual_average() {
    let mut rng = test_rng(3);
    let a = random_net(&mut rng, 4, &[6], ActivationSpec::softplus(5.0), 1.0);
    let b = random_net(&mut rng, 4, &[6], ActivationSpec::softplus(5.0), 1.0);
    let rows: Vec<Vec<f64>> = (0..40).map(|_| normal_vec(&mut rng, 4, 1.0)).collect();
    let data = Dataset::from_rows(&rows, vec![0; 40]).unwrap();
    let manual: f64 = rows
        .iter()
        .map(|x| {
            let ga = a.input_gradient(x).unwrap();
            let gb = b.input_gradient(x).unwrap();
            ga.iter().zip(&gb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
        })
        .sum::<f64>()
        / 40.0;
    assert!((gradient_distance(&a, &b, &data).unwrap() - manual).abs() < 1e-12);
}

#[test]
fn distances_satisfy_triangle_inequality() {
    let mut rng = test_rng(4);
    let rows: Vec<Vec<f64>> = (0..10).map(|_| normal_vec(&mut rng, 3, 1.0)).collect();
    let data = Dataset::from_rows(&rows, vec![1; 10]).unwrap();
    for _ in 0..1000 {
        let [a, b, c] = [0; 3].map(|_| random_net(&mut rng, 3, &[4], ActivationSpec::softplus(2.0), 1.0));
        let p = |x: &MlpParams, y: &MlpParams| param_distance(x, y).unwrap();
        let g = |x: &MlpParams, y: &MlpParams| gradient_distance(x, y, &data).unwrap();
        assert!(p(&a, &c) <= p(&a, &b) + p(&b, &c) + 1e-9);
        assert!(g(&a, &c) <= g(&a, &b) + g(&b, &c) + 1e-9);
    }
}
