//! Empirical evaluation of the parameter-shift and explanation-shift bounds.

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distance::{hungarian_distance, LabelMode};
use crate::error::{Error, Result};
use crate::linalg::{dist2, norm2};
use crate::nn::{sigmoid, MlpParams, Workspace};
use crate::rng::rng_from_seed;
use crate::stability::{gradient_distance, param_distance};
use crate::trainer::regularized_loss;

/// Multiplier applied to the largest observed loss-input gradient norm.
pub const LIPSCHITZ_SAFETY: f64 = 1.5;

/// Relative slack granted to the finite-difference directional estimate when
/// checking the explanation-shift inequality.
pub const LEMMA2_TOLERANCE: f64 = 0.05;

/// Largest `‖∇ₓ ℓ(x, y; θ)‖₂ = |σ(f(x)) − y|·‖∇ₓ f(x)‖₂` over every row of
/// every dataset.
pub fn max_loss_input_gradient(params: &MlpParams, datasets: &[&Dataset]) -> Result<f64> {
    if datasets.iter().all(|d| d.n() == 0) {
        return Err(Error::Argument("no data points to estimate a Lipschitz constant".into()));
    }
    let d = params.input_dim();
    let mut ws = Workspace::new(params);
    let mut g = vec![0.0; d];
    let mut best: f64 = 0.0;
    for ds in datasets {
        if ds.d() != d {
            return Err(Error::Shape(format!(
                "dataset has {} features, model expects {d}",
                ds.d()
            )));
        }
        for (x, &y) in ds.rows().zip(ds.labels()) {
            params.input_gradient_ws(x, &mut ws, &mut g);
            let f = params.forward_ws(x, &mut ws);
            best = best.max((sigmoid(f) - f64::from(y)).abs() * norm2(&g));
        }
    }
    Ok(best)
}

/// Empirical loss-input Lipschitz constant: [`max_loss_input_gradient`]
/// times [`LIPSCHITZ_SAFETY`].
pub fn lipschitz_estimate(params: &MlpParams, datasets: &[&Dataset]) -> Result<f64> {
    Ok(LIPSCHITZ_SAFETY * max_loss_input_gradient(params, datasets)?)
}

/// `√(L·dist/γ) + C`.
pub fn thm1_bound(lipschitz: f64, dist: f64, gamma: f64, c: f64) -> Result<f64> {
    if gamma == 0.0 {
        return Err(Error::UndefinedBound(
            "the parameter-shift bound needs weight decay (gamma > 0)".into(),
        ));
    }
    if !(gamma > 0.0) || !(lipschitz >= 0.0) || !(dist >= 0.0) || !(c >= 0.0) {
        return Err(Error::Argument(format!(
            "bound inputs must be non-negative with gamma > 0: L={lipschitz}, dist={dist}, gamma={gamma}, C={c}"
        )));
    }
    Ok((lipschitz * dist / gamma).sqrt() + c)
}

/// `√(max(0, ℓ₁ − ℓ₂)/γ)` from the regularized optimal losses.
pub fn thm1_c(loss1_on_d1: f64, loss2_on_d2: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::UndefinedBound(format!("C needs gamma > 0, got {gamma}")));
    }
    Ok(((loss1_on_d1 - loss2_on_d2).max(0.0) / gamma).sqrt())
}

fn require_1hidden(params: &MlpParams) -> Result<()> {
    if params.layers().len() != 2 {
        return Err(Error::Unsupported(format!(
            "needs exactly one hidden layer, network has {}",
            params.layers().len() - 1
        )));
    }
    Ok(())
}

/// 2-path-norm `√(Σⱼₖ (v_j W_jk)²)` of a one-hidden-layer network, biases
/// excluded.
pub fn path_norm_1hidden(params: &MlpParams) -> Result<f64> {
    require_1hidden(params)?;
    let (hid, out) = (&params.layers()[0], &params.layers()[1]);
    let mut s = 0.0;
    for j in 0..hid.n_out {
        let vj = out.w[j];
        for &w in hid.w_row(j) {
            s += (vj * w) * (vj * w);
        }
    }
    Ok(s.sqrt())
}

/// `‖θ‖ + β·φ(θ)` with the weight-only norm.
pub fn thm2_bound(params: &MlpParams, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::Argument(format!("beta must be >= 0, got {beta}")));
    }
    Ok(params.weight_norm() + beta * path_norm_1hidden(params)?)
}

/// A Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

/// Mean over `x ~ N(0, I)` of the Frobenius norm of `∇_θ∇ₓf(x)`.
pub fn thm2_lhs_estimate(params: &MlpParams, n_samples: usize, seed: u64) -> Result<McEstimate> {
    require_1hidden(params)?;
    if n_samples < 2 {
        return Err(Error::Argument("need at least two Monte-Carlo samples".into()));
    }
    let d = params.input_dim();
    let mut rng = rng_from_seed(seed);
    let mut x = vec![0.0; d];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        x.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let v = params.mixed_derivative_1hidden(&x)?.matrix.frobenius_norm();
        sum += v;
        sum_sq += v * v;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(McEstimate {
        mean,
        std_error: (var / n).sqrt(),
        n_samples,
    })
}

/// Mean over a uniform λ grid on `[0, 1]` (endpoints included) and over
/// `data` of the central-difference directional derivative of `∇ₓf` along
/// the unit direction from `θ₁` to `θ₂`.
pub fn grad_param_lipschitz_directional(
    t1: &MlpParams,
    t2: &MlpParams,
    data: &Dataset,
    n_lambda: usize,
    fd_step: f64,
) -> Result<f64> {
    if !t1.same_architecture(t2) {
        return Err(Error::Shape("models have different architectures".into()));
    }
    if n_lambda < 2 {
        return Err(Error::Argument(format!("n_lambda must be >= 2, got {n_lambda}")));
    }
    if !(fd_step > 0.0) {
        return Err(Error::Argument(format!("fd_step must be > 0, got {fd_step}")));
    }
    if data.n() == 0 || data.d() != t1.input_dim() {
        return Err(Error::Shape("data must be non-empty and match the model input".into()));
    }
    let p1 = t1.flatten();
    let p2 = t2.flatten();
    let len = dist2(&p1, &p2);
    if len == 0.0 {
        return Err(Error::Degenerate("the two parameter vectors coincide".into()));
    }
    let u: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| (b - a) / len).collect();
    let mut pairs = Vec::with_capacity(n_lambda);
    for l in 0..n_lambda {
        let lam = l as f64 / (n_lambda - 1) as f64;
        let at = |s: f64| -> Vec<f64> {
            p1.iter()
                .zip(&p2)
                .zip(&u)
                .map(|((a, b), ui)| (1.0 - lam) * a + lam * b + s * ui)
                .collect()
        };
        pairs.push((t1.with_flat(&at(fd_step))?, t1.with_flat(&at(-fd_step))?));
    }
    let d = data.d();
    let per_row: Vec<f64> = (0..data.n())
        .into_par_iter()
        .map_init(
            || (Workspace::new(t1), vec![0.0; d], vec![0.0; d]),
            |(ws, gp, gm), i| {
                let x = data.row(i);
                pairs
                    .iter()
                    .map(|(plus, minus)| {
                        plus.input_gradient_ws(x, ws, gp);
                        minus.input_gradient_ws(x, ws, gm);
                        dist2(gp, gm) / (2.0 * fd_step)
                    })
                    .sum::<f64>()
            },
        )
        .collect();
    Ok(per_row.iter().sum::<f64>() / (data.n() * n_lambda) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundOptions {
    pub gamma: f64,
    /// Curvature constant for the one-hidden-layer bound; defaults to the
    /// softplus β of the model.
    pub beta: Option<f64>,
    pub label_mode: LabelMode,
    pub n_lambda: usize,
    pub fd_step: f64,
    pub thm2_samples: usize,
    pub seed: u64,
}

impl Default for BoundOptions {
    fn default() -> Self {
        Self {
            gamma: 1e-3,
            beta: None,
            label_mode: LabelMode::Ignore,
            n_lambda: 9,
            fd_step: 1e-4,
            thm2_samples: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundHolds {
    /// `None` when the bound is undefined (γ = 0).
    pub thm1: Option<bool>,
    pub lemma2: bool,
    /// `None` unless the model has one hidden layer and a curvature constant.
    pub thm2: Option<bool>,
}

/// Every bound quantity for one model pair. `a` is trained on `d1`, `b` on
/// the shifted `d2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lipschitz_l: f64,
    pub dataset_distance: f64,
    pub gamma: f64,
    pub c: Option<f64>,
    pub thm1_bound: Option<f64>,
    pub observed_param_shift: f64,
    pub lemma2_lhs: f64,
    pub lemma2_rhs: f64,
    pub grad_param_lipschitz: f64,
    pub n_lambda: usize,
    pub fd_step: f64,
    pub beta: Option<f64>,
    pub thm2_lhs: Option<f64>,
    pub thm2_lhs_std_error: Option<f64>,
    pub thm2_rhs: Option<f64>,
    pub path_norm: Option<f64>,
    pub holds: BoundHolds,
}

pub fn bound_report(
    a: &MlpParams,
    b: &MlpParams,
    d1: &Dataset,
    d2: &Dataset,
    opts: &BoundOptions,
) -> Result<BoundReport> {
    let lipschitz_l = lipschitz_estimate(a, &[d1, d2])?;
    let dataset_distance = hungarian_distance(d1, d2, opts.label_mode)?.mean_cost;
    let observed = param_distance(a, b)?;
    let (c, thm1) = if opts.gamma == 0.0 {
        (None, None)
    } else {
        let c = thm1_c(
            regularized_loss(a, d1, opts.gamma),
            regularized_loss(b, d2, opts.gamma),
            opts.gamma,
        )?;
        (Some(c), Some(thm1_bound(lipschitz_l, dataset_distance, opts.gamma, c)?))
    };
    let lemma2_lhs = gradient_distance(a, b, d1)?;
    let glip = if observed == 0.0 {
        0.0
    } else {
        grad_param_lipschitz_directional(a, b, d1, opts.n_lambda, opts.fd_step)?
    };
    let lemma2_rhs = glip * observed;
    let beta = opts.beta.or_else(|| {
        let act = a.activation();
        act.is_smooth().then_some(act.beta)
    });
    let (thm2_lhs, thm2_se, thm2_rhs, path_norm) = match (a.layers().len(), beta) {
        (2, Some(beta)) => {
            let est = thm2_lhs_estimate(a, opts.thm2_samples, opts.seed)?;
            (
                Some(est.mean),
                Some(est.std_error),
                Some(thm2_bound(a, beta)?),
                Some(path_norm_1hidden(a)?),
            )
        }
        _ => (None, None, None, None),
    };
    Ok(BoundReport {
        lipschitz_l,
        dataset_distance,
        gamma: opts.gamma,
        c,
        thm1_bound: thm1,
        observed_param_shift: observed,
        lemma2_lhs,
        lemma2_rhs,
        grad_param_lipschitz: glip,
        n_lambda: opts.n_lambda,
        fd_step: opts.fd_step,
        beta,
        thm2_lhs,
        thm2_lhs_std_error: thm2_se,
        thm2_rhs,
        path_norm,
        holds: BoundHolds {
            thm1: thm1.map(|bound| observed <= bound),
            lemma2: lemma2_lhs <= lemma2_rhs * (1.0 + LEMMA2_TOLERANCE),
            thm2: thm2_lhs.zip(thm2_rhs).map(|(l, r)| l <= r),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ActivationSpec, Dense};

    fn one_hidden(w1: Vec<f64>, d: usize, v: Vec<f64>, act: ActivationSpec) -> MlpParams {
        let h = v.len();
        MlpParams::new(
            vec![
                Dense {
                    n_in: d,
                    n_out: h,
                    w: w1,
                    b: vec![0.0; h],
                },
                Dense {
                    n_in: h,
                    n_out: 1,
                    w: v,
                    b: vec![0.0],
                },
            ],
            act,
        )
        .unwrap()
    }

    #[test]
    fn thm1_examples() {
        assert_eq!(thm1_bound(1.0, 1.0, 1.0, 0.0).unwrap(), 1.0);
        assert!((thm1_bound(4.0, 1.0, 0.01, 0.0).unwrap() - 20.0).abs() < 1e-12);
        assert!(matches!(thm1_bound(1.0, 1.0, 0.0, 0.0), Err(Error::UndefinedBound(_))));
        assert!(thm1_bound(1.0, 1.0, 0.01, 0.0).unwrap() > thm1_bound(1.0, 1.0, 0.1, 0.0).unwrap());
    }

    #[test]
    fn c_examples() {
        assert_eq!(thm1_c(0.3, 0.3, 0.1).unwrap(), 0.0);
        assert!((thm1_c(0.02, 0.01, 0.01).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(thm1_c(0.1, 0.5, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn path_norm_examples() {
        let net = one_hidden(vec![1.0, 2.0], 1, vec![3.0, 4.0], ActivationSpec::softplus(2.0));
        assert!((path_norm_1hidden(&net).unwrap() - 73f64.sqrt()).abs() < 1e-12);
        let expected = 30f64.sqrt() + 2.0 * 73f64.sqrt();
        assert!((thm2_bound(&net, 2.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 22.565).abs() < 1e-3);
        let zero = MlpParams::zeros(3, &[4], ActivationSpec::softplus(5.0)).unwrap();
        assert_eq!(path_norm_1hidden(&zero).unwrap(), 0.0);
        assert_eq!(thm2_bound(&zero, 5.0).unwrap(), 0.0);
        assert_eq!(thm2_lhs_estimate(&zero, 10, 0).unwrap().mean, 0.0);
        let deep = MlpParams::zeros(3, &[4, 4], ActivationSpec::relu()).unwrap();
        assert!(matches!(path_norm_1hidden(&deep), Err(Error::Unsupported(_))));
    }

    #[test]
    fn lipschitz_zero_model() {
        let zero = MlpParams::zeros(2, &[3], ActivationSpec::relu()).unwrap();
        let data = Dataset::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]], vec![0, 1]).unwrap();
        assert_eq!(lipschitz_estimate(&zero, &[&data]).unwrap(), 0.0);
    }

    #[test]
    fn directional_rejects_identical() {
        let net = one_hidden(vec![1.0, 2.0], 1, vec![3.0, 4.0], ActivationSpec::softplus(2.0));
        let data = Dataset::from_rows(&[vec![0.3]], vec![0]).unwrap();
        assert!(matches!(
            grad_param_lipschitz_directional(&net, &net, &data, 9, 1e-4),
            Err(Error::Degenerate(_))
        ));
    }
}
