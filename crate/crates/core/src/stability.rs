//! Distances between two models and agreement of their top-K explanations.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::explain::{sign, top_k, Attribution, TopKSet};
use crate::linalg::dist2;
use crate::nn::{MlpParams, Workspace};

fn check_same(t1: &MlpParams, t2: &MlpParams) -> Result<()> {
    if !t1.same_architecture(t2) {
        return Err(Error::Shape("models have different architectures".into()));
    }
    Ok(())
}

/// ℓ2 norm of the flattened parameter difference, biases included.
pub fn param_distance(t1: &MlpParams, t2: &MlpParams) -> Result<f64> {
    check_same(t1, t2)?;
    Ok(dist2(&t1.flatten(), &t2.flatten()))
}

/// Mean over `test` of `‖∇ₓf(x;θ₁) − ∇ₓf(x;θ₂)‖₂`.
pub fn gradient_distance(t1: &MlpParams, t2: &MlpParams, test: &Dataset) -> Result<f64> {
    check_same(t1, t2)?;
    if test.n() == 0 {
        return Err(Error::Argument("gradient distance over an empty dataset".into()));
    }
    if test.d() != t1.input_dim() {
        return Err(Error::Shape(format!(
            "dataset has {} features, model expects {}",
            test.d(),
            t1.input_dim()
        )));
    }
    let per_sample: Vec<f64> = (0..test.n())
        .into_par_iter()
        .map_init(
            || {
                let d = test.d();
                (Workspace::new(t1), Workspace::new(t2), vec![0.0; d], vec![0.0; d])
            },
            |(w1, w2, g1, g2), i| {
                let x = test.row(i);
                t1.input_gradient_ws(x, w1, g1);
                t2.input_gradient_ws(x, w2, g2);
                dist2(g1, g2)
            },
        )
        .collect();
    Ok(per_sample.iter().sum::<f64>() / test.n() as f64)
}

fn check_k(a: &TopKSet, b: &TopKSet) -> Result<()> {
    if a.k() != b.k() || a.k() == 0 {
        return Err(Error::Argument(format!(
            "top-K sets must share k >= 1, got {} and {}",
            a.k(),
            b.k()
        )));
    }
    Ok(())
}

/// Sign agreement: fraction of signed top-K entries present in both sets.
pub fn sa(top1: &TopKSet, top2: &TopKSet) -> Result<f64> {
    check_k(top1, top2)?;
    let shared = top1.entries.iter().filter(|e| top2.contains(**e)).count();
    Ok(shared as f64 / top1.k() as f64)
}

/// Consistent direction of contributions: 1 when every feature in either
/// top-K set has the same sign under both attributions.
pub fn cdc(attr1: &Attribution, attr2: &Attribution, k: usize) -> Result<u8> {
    if attr1.values.len() != attr2.values.len() {
        return Err(Error::Shape("attributions have different lengths".into()));
    }
    let t1 = top_k(attr1, k)?;
    let t2 = top_k(attr2, k)?;
    let agree = t1
        .indices()
        .chain(t2.indices())
        .all(|i| sign(attr1.values[i]) == sign(attr2.values[i]));
    Ok(u8::from(agree))
}

/// Signed set agreement: 1 when both top-K sets hold the same signed
/// features, ignoring order.
pub fn ssa(top1: &TopKSet, top2: &TopKSet) -> Result<u8> {
    check_k(top1, top2)?;
    Ok(u8::from(top1.entries.iter().all(|e| top2.contains(*e))))
}

/// Per-pair SA, CDC and SSA at one `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScores {
    pub sa: f64,
    pub cdc: u8,
    pub ssa: u8,
}

pub fn pair_scores(attr1: &Attribution, attr2: &Attribution, k: usize) -> Result<PairScores> {
    let t1 = top_k(attr1, k)?;
    let t2 = top_k(attr2, k)?;
    Ok(PairScores {
        sa: sa(&t1, &t2)?,
        cdc: cdc(attr1, attr2, k)?,
        ssa: ssa(&t1, &t2)?,
    })
}

/// Sample means of SA, CDC and SSA over aligned attribution lists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopKMeans {
    pub sa: f64,
    pub cdc: f64,
    pub ssa: f64,
}

pub fn topk_means(a1: &[Attribution], a2: &[Attribution], k: usize) -> Result<TopKMeans> {
    if a1.len() != a2.len() || a1.is_empty() {
        return Err(Error::Argument(format!(
            "need two equally long non-empty attribution lists, got {} and {}",
            a1.len(),
            a2.len()
        )));
    }
    let mut acc = (0.0, 0.0, 0.0);
    for (x, y) in a1.iter().zip(a2) {
        let s = pair_scores(x, y, k)?;
        acc.0 += s.sa;
        acc.1 += f64::from(s.cdc);
        acc.2 += f64::from(s.ssa);
    }
    let n = a1.len() as f64;
    Ok(TopKMeans {
        sa: acc.0 / n,
        cdc: acc.1 / n,
        ssa: acc.2 / n,
    })
}

/// Mean and interquartile bracket of a list of trial values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub q25: f64,
    pub q75: f64,
}

/// Quantile by linear interpolation between order statistics (type 7).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::Argument("cannot aggregate an empty list".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in aggregated values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Aggregate {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        q25: quantile(&sorted, 0.25),
        q75: quantile(&sorted, 0.75),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopKAggregate {
    pub sa: Aggregate,
    pub cdc: Aggregate,
    pub ssa: Aggregate,
}

/// Trial-level stability summary. Each input list holds one value per trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub param_l2: Aggregate,
    pub grad_l2_mean: Aggregate,
    /// Keyed by `k` as a string.
    pub topk: BTreeMap<String, TopKAggregate>,
}

impl StabilityReport {
    pub fn from_trials(
        param_l2: &[f64],
        grad_l2: &[f64],
        topk: &BTreeMap<usize, Vec<TopKMeans>>,
    ) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (k, trials) in topk {
            let col = |f: fn(&TopKMeans) -> f64| trials.iter().map(f).collect::<Vec<_>>();
            out.insert(
                k.to_string(),
                TopKAggregate {
                    sa: aggregate(&col(|t| t.sa))?,
                    cdc: aggregate(&col(|t| t.cdc))?,
                    ssa: aggregate(&col(|t| t.ssa))?,
                },
            );
        }
        Ok(Self {
            param_l2: aggregate(param_l2)?,
            grad_l2_mean: aggregate(grad_l2)?,
            topk: out,
        })
    }
}
