//! Feature attributions of the logit: saliency, SmoothGrad, LIME and
//! KernelSHAP, plus signed top-K extraction.

use std::collections::HashSet;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::weighted_ridge;
use crate::nn::{MlpParams, Workspace};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "saliency")]
    Saliency,
    #[serde(rename = "smoothgrad")]
    SmoothGrad,
    #[serde(rename = "lime")]
    Lime,
    #[serde(rename = "kshap")]
    KernelShap,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Saliency => "saliency",
            Method::SmoothGrad => "smoothgrad",
            Method::Lime => "lime",
            Method::KernelShap => "kshap",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saliency" => Ok(Method::Saliency),
            "smoothgrad" => Ok(Method::SmoothGrad),
            "lime" => Ok(Method::Lime),
            "kshap" | "kernelshap" => Ok(Method::KernelShap),
            other => Err(Error::Argument(format!("unknown explainer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub values: Vec<f64>,
    pub method: Method,
    /// Index of the explained input within its dataset.
    pub input_id: usize,
}

/// Sign of an attribution; exact zeros carry sign 0.
pub fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// The `k` largest-magnitude features with their signs, ordered by
/// descending magnitude; ties go to the lower index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopKSet {
    pub entries: Vec<(usize, i8)>,
}

impl TopKSet {
    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn contains(&self, entry: (usize, i8)) -> bool {
        self.entries.contains(&entry)
    }
}

pub fn top_k_values(values: &[f64], k: usize) -> Result<TopKSet> {
    if k == 0 || k > values.len() {
        return Err(Error::Argument(format!(
            "k must lie in 1..={}, got {k}",
            values.len()
        )));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .abs()
            .total_cmp(&values[a].abs())
            .then(a.cmp(&b))
    });
    Ok(TopKSet {
        entries: idx[..k].iter().map(|&i| (i, sign(values[i]))).collect(),
    })
}

pub fn top_k(attr: &Attribution, k: usize) -> Result<TopKSet> {
    top_k_values(&attr.values, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothGradConfig {
    pub noise_sigma: f64,
    pub n_samples: usize,
}

impl Default for SmoothGradConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.5,
            n_samples: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LimeConfig {
    pub n_samples: usize,
    /// Defaults to `0.75·√d` when absent.
    pub kernel_width: Option<f64>,
    pub ridge_lambda: f64,
    pub perturb_sigma: f64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            kernel_width: None,
            ridge_lambda: 1e-6,
            perturb_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelShapConfig {
    /// Coalitions evaluated including the empty and full ones; defaults to
    /// `2d + 2048`.
    pub n_coalitions: Option<usize>,
    pub ridge_lambda: f64,
}

impl Default for KernelShapConfig {
    fn default() -> Self {
        Self {
            n_coalitions: None,
            ridge_lambda: 1e-8,
        }
    }
}

/// An explainer together with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method")]
pub enum ExplainerSpec {
    #[serde(rename = "saliency")]
    Saliency,
    #[serde(rename = "smoothgrad")]
    SmoothGrad(#[serde(default)] SmoothGradConfig),
    #[serde(rename = "lime")]
    Lime(#[serde(default)] LimeConfig),
    #[serde(rename = "kshap")]
    KernelShap(#[serde(default)] KernelShapConfig),
}

impl ExplainerSpec {
    pub fn method(&self) -> Method {
        match self {
            ExplainerSpec::Saliency => Method::Saliency,
            ExplainerSpec::SmoothGrad(_) => Method::SmoothGrad,
            ExplainerSpec::Lime(_) => Method::Lime,
            ExplainerSpec::KernelShap(_) => Method::KernelShap,
        }
    }

    pub fn default_for(method: Method) -> Self {
        match method {
            Method::Saliency => ExplainerSpec::Saliency,
            Method::SmoothGrad => ExplainerSpec::SmoothGrad(SmoothGradConfig::default()),
            Method::Lime => ExplainerSpec::Lime(LimeConfig::default()),
            Method::KernelShap => ExplainerSpec::KernelShap(KernelShapConfig::default()),
        }
    }

    /// Whether the explainer is expensive enough that experiments restrict it
    /// to a test subsample.
    pub fn is_sampling_based(&self) -> bool {
        matches!(self, ExplainerSpec::Lime(_) | ExplainerSpec::KernelShap(_))
    }
}

/// Input gradient of the logit.
pub fn saliency(params: &MlpParams, x: &[f64]) -> Result<Attribution> {
    Ok(Attribution {
        values: params.input_gradient(x)?,
        method: Method::Saliency,
        input_id: 0,
    })
}

/// Mean input gradient over `n_samples` Gaussian perturbations of `x`.
pub fn smoothgrad(
    params: &MlpParams,
    x: &[f64],
    noise_sigma: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Attribution> {
    if n_samples == 0 {
        return Err(Error::Argument("SmoothGrad needs at least one sample".into()));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Argument(format!(
            "SmoothGrad noise must be >= 0, got {noise_sigma}"
        )));
    }
    let grad = params.input_gradient(x)?;
    if noise_sigma == 0.0 {
        return Ok(Attribution {
            values: grad,
            method: Method::SmoothGrad,
            input_id: 0,
        });
    }
    let d = x.len();
    let mut rng = rng_from_seed(seed);
    let mut ws = Workspace::new(params);
    let mut z = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut acc = vec![0.0; d];
    for _ in 0..n_samples {
        for (zi, xi) in z.iter_mut().zip(x) {
            *zi = xi + noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        params.input_gradient_ws(&z, &mut ws, &mut g);
        for (a, gi) in acc.iter_mut().zip(&g) {
            *a += gi;
        }
    }
    let inv = 1.0 / n_samples as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(Attribution {
        values: acc,
        method: Method::SmoothGrad,
        input_id: 0,
    })
}

/// Local linear surrogate: weighted ridge regression of the logit on
/// Gaussian perturbations `z ~ N(x, perturb_sigma²I)`, with kernel weights
/// `exp(−‖z−x‖²/width²)` and an unpenalized intercept. Returns the slopes.
pub fn lime(params: &MlpParams, x: &[f64], config: &LimeConfig, seed: u64) -> Result<Attribution> {
    let d = params.input_dim();
    if x.len() != d {
        return Err(Error::Shape(format!("input has {} features, expected {d}", x.len())));
    }
    if config.n_samples < d + 2 {
        return Err(Error::Argument(format!(
            "LIME needs at least d + 2 = {} samples, got {}",
            d + 2,
            config.n_samples
        )));
    }
    let width = config.kernel_width.unwrap_or(0.75 * (d as f64).sqrt());
    if !(width > 0.0) || !(config.perturb_sigma > 0.0) || !(config.ridge_lambda >= 0.0) {
        return Err(Error::Argument(
            "LIME kernel width and perturbation scale must be > 0, ridge >= 0".into(),
        ));
    }
    let p = d + 1;
    let n = config.n_samples;
    let mut rng = rng_from_seed(seed);
    let mut ws = Workspace::new(params);
    let mut design = Vec::with_capacity(n * p);
    let mut target = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut z = vec![0.0; d];
    for _ in 0..n {
        design.push(1.0);
        let mut sq = 0.0;
        for (zi, xi) in z.iter_mut().zip(x) {
            let e = config.perturb_sigma * rng.sample::<f64, _>(StandardNormal);
            *zi = xi + e;
            sq += e * e;
            design.push(e);
        }
        weights.push((-sq / (width * width)).exp());
        target.push(params.forward_ws(&z, &mut ws));
    }
    let coef = weighted_ridge(&design, &target, &weights, p, config.ridge_lambda, &[0])?;
    Ok(Attribution {
        values: coef[1..].to_vec(),
        method: Method::Lime,
        input_id: 0,
    })
}

/// Shapley-kernel weight `(d−1) / (C(d,s)·s·(d−s))` of one coalition of size
/// `s`.
pub fn shapley_kernel_weight(d: usize, s: usize) -> f64 {
    assert!(s > 0 && s < d, "kernel weight is defined for 0 < s < d");
    (d - 1) as f64 / (binomial(d, s) * s as f64 * (d - s) as f64)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn coalition_input(mask: &[bool], x: &[f64], background: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = if mask[i] { x[i] } else { background[i] };
    }
}

/// Coalitions (excluding empty and full) and their regression weights.
fn choose_coalitions(d: usize, budget: usize, seed: u64) -> Vec<(Vec<bool>, f64)> {
    let total = if d < 63 { (1u64 << d) - 2 } else { u64::MAX };
    if (budget as u64) >= total {
        return (1..=total)
            .map(|m| {
                let mask: Vec<bool> = (0..d).map(|i| m >> i & 1 == 1).collect();
                let s = mask.iter().filter(|&&b| b).count();
                (mask, shapley_kernel_weight(d, s))
            })
            .collect();
    }
    // Sizes are drawn in proportion to their total kernel mass, members
    // uniformly within a size; duplicates are rejected.
    let size_mass: Vec<f64> = (1..d)
        .map(|s| (d - 1) as f64 / (s as f64 * (d - s) as f64))
        .collect();
    let mass_total: f64 = size_mass.iter().sum();
    let mut rng = rng_from_seed(seed);
    let mut seen: HashSet<Vec<bool>> = HashSet::with_capacity(budget);
    let mut picked: Vec<Vec<bool>> = Vec::with_capacity(budget);
    let max_draws = budget.saturating_mul(1000).max(10_000);
    let mut draws = 0;
    while picked.len() < budget && draws < max_draws {
        draws += 1;
        let mut u = rng.random::<f64>() * mass_total;
        let mut s = d - 1;
        for (k, &m) in size_mass.iter().enumerate() {
            if u < m {
                s = k + 1;
                break;
            }
            u -= m;
        }
        let mut mask = vec![false; d];
        for i in sample_indices(&mut rng, d, s) {
            mask[i] = true;
        }
        if seen.insert(mask.clone()) {
            picked.push(mask);
        }
    }
    let mut per_size = vec![0usize; d];
    for m in &picked {
        per_size[m.iter().filter(|&&b| b).count()] += 1;
    }
    picked
        .into_iter()
        .map(|m| {
            let s = m.iter().filter(|&&b| b).count();
            let w = size_mass[s - 1] / per_size[s] as f64;
            (m, w)
        })
        .collect()
}

/// KernelSHAP against a single background point.
///
/// The empty and full coalitions are always evaluated; they fix the base
/// value `f(background)` and the efficiency constraint
/// `Σφ = f(x) − f(background)`, which is imposed exactly by eliminating the
/// last feature's variable. The remaining coalitions are enumerated when the
/// budget allows, otherwise sampled without replacement by kernel mass.
pub fn kernel_shap(
    params: &MlpParams,
    x: &[f64],
    background: &[f64],
    n_coalitions: usize,
    ridge_lambda: f64,
    seed: u64,
) -> Result<Attribution> {
    let d = params.input_dim();
    if d < 2 {
        return Err(Error::Domain("KernelSHAP needs at least two features".into()));
    }
    if x.len() != d || background.len() != d {
        return Err(Error::Shape(format!(
            "input/background have {}/{} features, expected {d}",
            x.len(),
            background.len()
        )));
    }
    if n_coalitions < d + 2 {
        return Err(Error::Argument(format!(
            "KernelSHAP needs at least d + 2 = {} coalitions, got {n_coalitions}",
            d + 2
        )));
    }
    let mut ws = Workspace::new(params);
    let base = params.forward_ws(background, &mut ws);
    let full = params.forward_ws(x, &mut ws);
    let delta = full - base;

    let coalitions = choose_coalitions(d, n_coalitions - 2, seed);
    let weight_sum: f64 = coalitions.iter().map(|c| c.1).sum();
    let p = d - 1;
    let mut design = Vec::with_capacity(coalitions.len() * p);
    let mut target = Vec::with_capacity(coalitions.len());
    let mut weights = Vec::with_capacity(coalitions.len());
    let mut z = vec![0.0; d];
    for (mask, w) in &coalitions {
        coalition_input(mask, x, background, &mut z);
        let v = params.forward_ws(&z, &mut ws);
        let last = f64::from(u8::from(mask[d - 1]));
        for &m in &mask[..p] {
            design.push(f64::from(u8::from(m)) - last);
        }
        target.push(v - base - last * delta);
        weights.push(w / weight_sum);
    }
    let mut phi = weighted_ridge(&design, &target, &weights, p, ridge_lambda, &[])?;
    let partial: f64 = phi.iter().sum();
    phi.push(delta - partial);
    Ok(Attribution {
        values: phi,
        method: Method::KernelShap,
        input_id: 0,
    })
}

/// Run `spec` on one input. `background` is required by KernelSHAP only.
pub fn explain(
    params: &MlpParams,
    x: &[f64],
    spec: &ExplainerSpec,
    seed: u64,
    background: Option<&[f64]>,
) -> Result<Attribution> {
    match spec {
        ExplainerSpec::Saliency => saliency(params, x),
        ExplainerSpec::SmoothGrad(c) => smoothgrad(params, x, c.noise_sigma, c.n_samples, seed),
        ExplainerSpec::Lime(c) => lime(params, x, c, seed),
        ExplainerSpec::KernelShap(c) => {
            let bg = background
                .ok_or_else(|| Error::Argument("KernelSHAP requires a background point".into()))?;
            let n = c.n_coalitions.unwrap_or(2 * x.len() + 2048);
            kernel_shap(params, x, bg, n, c.ridge_lambda, seed)
        }
    }
}

/// Explain each row in `rows` (given by dataset index). Sample `i` uses the
/// seed `derive_seed(seed, "explain", i)` so results do not depend on which
/// other rows are explained.
pub fn explain_rows<'a>(
    params: &MlpParams,
    rows: impl IntoIterator<Item = (usize, &'a [f64])>,
    spec: &ExplainerSpec,
    seed: u64,
    background: Option<&[f64]>,
) -> Result<Vec<Attribution>> {
    rows.into_iter()
        .map(|(i, x)| {
            let mut a = explain(params, x, spec, derive_seed(seed, "explain", i as u64), background)?;
            a.input_id = i;
            Ok(a)
        })
        .collect()
}
