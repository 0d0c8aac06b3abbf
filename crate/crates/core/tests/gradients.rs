mod common;

use common::{normal_vec, random_net, rel_err, test_rng};
use proptest::prelude::*;
use xstab_core::nn::{bce_with_logit, ActivationSpec, MlpParams};

const FD_STEP: f64 = 1e-5;

/// Straight-line evaluator written independently of the library's passes.
fn reference_forward(net: &MlpParams, x: &[f64]) -> f64 {
    let act = net.activation();
    let beta = act.beta;
    let sigma = |z: f64| -> f64 {
        if act.is_smooth() {
            (1.0 + (beta * z).exp()).ln() / beta
        } else if z > 0.0 {
            z
        } else {
            0.0
        }
    };
    let mut h = x.to_vec();
    let n = net.layers().len();
    for (li, layer) in net.layers().iter().enumerate() {
        let mut next = Vec::with_capacity(layer.n_out);
        for o in 0..layer.n_out {
            let mut s = layer.b[o];
            for (i, hi) in h.iter().enumerate() {
                s += layer.w[o * layer.n_in + i] * hi;
            }
            next.push(if li + 1 < n { sigma(s) } else { s });
        }
        h = next;
    }
    h[0]
}

#[test]
fn forward_matches_reference_evaluator() {
    let mut rng = test_rng(1);
    let net = random_net(&mut rng, 18, &[50], ActivationSpec::softplus(1.0), 1.0);
    let x = normal_vec(&mut rng, 18, 1.0);
    let got = net.forward(&x).unwrap();
    let want = reference_forward(&net, &x);
    assert!((got - want).abs() / want.abs() < 1e-12, "{got} vs {want}");

    let relu = net.with_activation(ActivationSpec::relu()).unwrap();
    let got = relu.forward(&x).unwrap();
    let want = reference_forward(&relu, &x);
    assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
}

#[test]
fn loss_at_logit_three() {
    // −ln σ(3) = ln(1 + e⁻³)
    let want = (1.0 + (-3.0f64).exp()).ln();
    assert!((bce_with_logit(3.0, 1) - want).abs() < 1e-15);
    assert!((want - 0.048587).abs() < 1e-6);
}

fn nets(seed: u64) -> impl Iterator<Item = (MlpParams, Vec<f64>, u8)> {
    let mut rng = test_rng(seed);
    (0..100).map(move |t| {
        let d = 1 + t % 6;
        let hidden: Vec<usize> = match t % 3 {
            0 => vec![1 + t % 7],
            1 => vec![3, 4],
            _ => vec![5, 2, 3],
        };
        let beta = [1.0, 2.0, 5.0][t % 3];
        let net = random_net(&mut rng, d, &hidden, ActivationSpec::softplus(beta), 1.0);
        let x = normal_vec(&mut rng, d, 1.0);
        let y = (t % 2) as u8;
        (net, x, y)
    })
}

#[test]
fn input_gradient_matches_finite_differences() {
    for (net, x, _) in nets(2) {
        let g = net.input_gradient(&x).unwrap();
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += FD_STEP;
            xm[i] -= FD_STEP;
            let fd = (net.forward(&xp).unwrap() - net.forward(&xm).unwrap()) / (2.0 * FD_STEP);
            assert!(rel_err(g[i], fd) < 1e-5, "coord {i}: {} vs {fd}", g[i]);
        }
    }
}

#[test]
fn param_gradient_matches_finite_differences() {
    for (net, x, y) in nets(3) {
        let g = net.param_gradient(&[(&x, y)], 0.0).unwrap().flatten();
        let theta = net.flatten();
        for p in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[p] += FD_STEP;
            tm[p] -= FD_STEP;
            let lp = net.with_flat(&tp).unwrap().loss(&x, y).unwrap();
            let lm = net.with_flat(&tm).unwrap().loss(&x, y).unwrap();
            let fd = (lp - lm) / (2.0 * FD_STEP);
            assert!(rel_err(g[p], fd) < 1e-5, "param {p}: {} vs {fd}", g[p]);
        }
    }
}

#[test]
fn duplicated_sample_gives_the_single_sample_gradient() {
    for (net, x, y) in nets(4).take(20) {
        let one = net.param_gradient(&[(&x, y)], 0.01).unwrap();
        let two = net.param_gradient(&[(&x, y), (&x, y)], 0.01).unwrap();
        assert_eq!(one.flatten(), two.flatten());
    }
}

#[test]
fn mixed_derivative_matches_finite_differences() {
    let mut rng = test_rng(5);
    for t in 0..100 {
        let d = 1 + t % 5;
        let h = 1 + t % 8;
        let beta = [2.0, 5.0, 10.0][t % 3];
        let net = if t == 0 {
            random_net(&mut rng, 3, &[4], ActivationSpec::softplus(1.0), 1.0)
        } else {
            random_net(&mut rng, d, &[h], ActivationSpec::softplus(beta), 1.0)
        };
        let x = normal_vec(&mut rng, net.input_dim(), 1.0);
        let m = net.mixed_derivative_1hidden(&x).unwrap().matrix;
        let theta = net.flatten();
        let mut fd_sq = 0.0;
        for p in 0..theta.len() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[p] += FD_STEP;
            tm[p] -= FD_STEP;
            let gp = net.with_flat(&tp).unwrap().input_gradient(&x).unwrap();
            let gm = net.with_flat(&tm).unwrap().input_gradient(&x).unwrap();
            for i in 0..x.len() {
                let fd = (gp[i] - gm[i]) / (2.0 * FD_STEP);
                fd_sq += fd * fd;
                assert!(
                    rel_err(m.get(p, i), fd) < 1e-4,
                    "net {t}, param {p}, input {i}: {} vs {fd}",
                    m.get(p, i)
                );
            }
        }
        let frob = m.frobenius_norm();
        assert!(frob.is_finite());
        assert!(rel_err(frob, fd_sq.sqrt()) < 1e-4);
    }
}

#[test]
fn softplus_approaches_relu() {
    let mut rng = test_rng(6);
    let relu = random_net(&mut rng, 4, &[6], ActivationSpec::relu(), 1.0);
    let x = normal_vec(&mut rng, 4, 1.0);
    let target = relu.forward(&x).unwrap();
    let errs: Vec<f64> = [2.0, 5.0, 10.0, 100.0]
        .iter()
        .map(|&b| {
            let sp = relu.with_activation(ActivationSpec::softplus(b)).unwrap();
            (sp.forward(&x).unwrap() - target).abs()
        })
        .collect();
    assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
    assert!(errs[3] < 1e-2);
}

proptest! {
    #[test]
    fn relu_one_hidden_is_positively_homogeneous(seed in any::<u64>(), c in 0.01f64..50.0) {
        let mut rng = test_rng(seed);
        let net = random_net(&mut rng, 3, &[5], ActivationSpec::relu(), 1.0);
        let mut flat = net.flatten();
        // zero the hidden and output biases
        for p in [15, 16, 17, 18, 19, 25] {
            flat[p] = 0.0;
        }
        let net = net.with_flat(&flat).unwrap();
        let x = normal_vec(&mut rng, 3, 1.0);
        let cx: Vec<f64> = x.iter().map(|v| c * v).collect();
        let lhs = net.forward(&cx).unwrap();
        let rhs = c * net.forward(&x).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
    }

    #[test]
    fn json_round_trip_is_bit_exact(seed in any::<u64>(), smooth in any::<bool>()) {
        let mut rng = test_rng(seed);
        let act = if smooth { ActivationSpec::softplus(3.5) } else { ActivationSpec::relu() };
        let net = random_net(&mut rng, 4, &[3, 2], act, 3.0);
        let back = MlpParams::from_json(&net.to_json().unwrap()).unwrap();
        let a: Vec<u64> = net.flatten().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.flatten().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
        prop_assert_eq!(net.activation(), back.activation());
    }
}
