#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use xstab_core::nn::{ActivationSpec, Dense, MlpParams};

/// Test-side generator, deliberately different from the library's.
pub fn test_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Network with standard-normal weights and biases scaled by `scale`.
pub fn random_net(
    rng: &mut impl Rng,
    input_dim: usize,
    hidden: &[usize],
    activation: ActivationSpec,
    scale: f64,
) -> MlpParams {
    let mut widths = vec![input_dim];
    widths.extend_from_slice(hidden);
    widths.push(1);
    let layers = widths
        .windows(2)
        .map(|w| Dense {
            n_in: w[0],
            n_out: w[1],
            w: normal_vec(rng, w[0] * w[1], scale / (w[0] as f64).sqrt()),
            b: normal_vec(rng, w[1], scale * 0.5),
        })
        .collect();
    MlpParams::new(layers, activation).unwrap()
}

pub fn affine_net(w: &[f64], b: f64) -> MlpParams {
    MlpParams::new(
        vec![Dense {
            n_in: w.len(),
            n_out: 1,
            w: w.to_vec(),
            b: vec![b],
        }],
        ActivationSpec::relu(),
    )
    .unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}
