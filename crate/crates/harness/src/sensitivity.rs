//! Per-epoch retraining curves for one swept hyperparameter.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xstab_core::data::{gaussian_shift, Dataset};
use xstab_core::explain::{saliency, top_k, TopKSet};
use xstab_core::nn::MlpParams;
use xstab_core::rng::{derive_seed, rng_from_seed};
use xstab_core::stability::{aggregate, gradient_distance, sa, Aggregate};
use xstab_core::trainer::{retrain, train, Architecture, TrainConfig};

use crate::config::{SensitivityConfig, SCHEMA_VERSION};
use crate::experiment::{base_seed, prepare_data, shift_seed, write_file, OutputError};
use crate::plot::{line_chart, Point, Series};

/// One retraining run: metric values after each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRun {
    pub value: f64,
    pub trial: usize,
    pub base_seed: u64,
    pub shift_seed: u64,
    pub grad_l2: Vec<f64>,
    pub sa: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPoint {
    /// Epochs completed, starting at 1.
    pub epoch: usize,
    pub grad_l2: Aggregate,
    pub sa: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub value: f64,
    pub points: Vec<EpochPoint>,
}

impl Curve {
    pub fn last(&self) -> &EpochPoint {
        self.points.last().expect("curves have at least one epoch")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityResult {
    pub schema_version: u32,
    pub name: String,
    pub param: String,
    pub k: usize,
    pub curves: Vec<Curve>,
    pub runs: Vec<SensitivityRun>,
    pub config: SensitivityConfig,
}

fn topk_list(params: &MlpParams, data: &Dataset, idx: &[usize], k: usize) -> xstab_core::Result<Vec<TopKSet>> {
    idx.iter().map(|&i| top_k(&saliency(params, data.row(i))?, k)).collect()
}

fn mean_sa(a: &[TopKSet], b: &[TopKSet]) -> xstab_core::Result<f64> {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += sa(x, y)?;
    }
    Ok(s / a.len() as f64)
}

fn one_run(
    cfg: &SensitivityConfig,
    train_data: &Dataset,
    eval: &Dataset,
    value: f64,
    trial: usize,
) -> xstab_core::Result<SensitivityRun> {
    let swept = cfg
        .sweep
        .param
        .apply(&cfg.train, value)
        .map_err(|e| xstab_core::Error::Argument(e.to_string()))?;
    let bseed = base_seed(cfg.master_seed, trial);
    let sseed = shift_seed(cfg.master_seed, trial, 0);
    let arch = Architecture {
        input_dim: train_data.d(),
        hidden: cfg.hidden.clone(),
        activation: cfg.activation,
    };
    let c = TrainConfig {
        seed: bseed,
        record_params: false,
        ..swept
    };
    let (base, _) = train(train_data, &arch, &c, None)?;
    let shifted = gaussian_shift(train_data, cfg.sigma, sseed)?;
    let traced = TrainConfig {
        record_params: true,
        ..c
    };
    let (_, trace) = retrain(bseed, &shifted, &arch, &traced, None)?;

    let all: Vec<usize> = (0..eval.n()).collect();
    let k = cfg.k.min(eval.d());
    let base_top = topk_list(&base, eval, &all, k)?;
    let mut grad_l2 = Vec::with_capacity(trace.epochs.len());
    let mut sas = Vec::with_capacity(trace.epochs.len());
    for e in &trace.epochs {
        let p = e.params.as_ref().expect("params recorded on request");
        grad_l2.push(gradient_distance(&base, p, eval)?);
        sas.push(mean_sa(&base_top, &topk_list(p, eval, &all, k)?)?);
    }
    Ok(SensitivityRun {
        value,
        trial,
        base_seed: bseed,
        shift_seed: sseed,
        grad_l2,
        sa: sas,
    })
}

pub fn run_sensitivity(cfg: &SensitivityConfig) -> xstab_core::Result<SensitivityResult> {
    let data = prepare_data(&cfg.dataset, cfg.test_fraction, None, cfg.master_seed)?;
    let eval = match cfg.eval_subsample {
        Some(m) if m < data.test.n() => {
            let mut rng = rng_from_seed(derive_seed(cfg.master_seed, "subsample", 0));
            let mut idx = sample_indices(&mut rng, data.test.n(), m).into_vec();
            idx.sort_unstable();
            data.test.select(&idx)?
        }
        _ => data.test.clone(),
    };
    let jobs: Vec<(f64, usize)> = cfg
        .sweep
        .values
        .iter()
        .flat_map(|&v| (0..cfg.n_trials).map(move |t| (v, t)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(v, t)| one_run(cfg, &data.train, &eval, v, t))
        .collect::<xstab_core::Result<Vec<_>>>()?;

    let mut curves = Vec::new();
    for &v in &cfg.sweep.values {
        let mine: Vec<&SensitivityRun> = runs.iter().filter(|r| r.value == v).collect();
        let n_epochs = mine[0].grad_l2.len();
        let mut points = Vec::with_capacity(n_epochs);
        for e in 0..n_epochs {
            let g: Vec<f64> = mine.iter().map(|r| r.grad_l2[e]).collect();
            let s: Vec<f64> = mine.iter().map(|r| r.sa[e]).collect();
            points.push(EpochPoint {
                epoch: e + 1,
                grad_l2: aggregate(&g)?,
                sa: aggregate(&s)?,
            });
        }
        curves.push(Curve { value: v, points });
    }
    Ok(SensitivityResult {
        schema_version: SCHEMA_VERSION,
        name: cfg.name.clone(),
        param: cfg.sweep.param.name().to_string(),
        k: cfg.k,
        curves,
        runs,
        config: cfg.clone(),
    })
}

impl SensitivityResult {
    /// Columns: param value, epoch, then mean/q25/q75 of each metric.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "{},epoch,grad_l2_mean,grad_l2_q25,grad_l2_q75,sa_mean,sa_q25,sa_q75\n",
            self.param
        );
        for c in &self.curves {
            for p in &c.points {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    c.value, p.epoch, p.grad_l2.mean, p.grad_l2.q25, p.grad_l2.q75, p.sa.mean, p.sa.q25, p.sa.q75
                ));
            }
        }
        out
    }

    pub fn series(&self, metric: fn(&EpochPoint) -> Aggregate) -> Vec<Series> {
        self.curves
            .iter()
            .map(|c| Series {
                label: format!("{} = {}", self.param, c.value),
                points: c
                    .points
                    .iter()
                    .map(|p| {
                        let a = metric(p);
                        Point {
                            x: p.epoch as f64,
                            mean: a.mean,
                            q25: a.q25,
                            q75: a.q75,
                        }
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn write(&self, out: &Path) -> Result<(), OutputError> {
        write_file(&out.join("sensitivity.csv"), self.to_csv().as_bytes())?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(&out.join("sensitivity.json"), text.as_bytes())?;
        let charts = [
            ("grad_l2", self.series(|p| p.grad_l2)),
            ("sa", self.series(|p| p.sa)),
        ];
        for (metric, series) in charts {
            let y = if metric == "sa" {
                format!("top-{} SA", self.k)
            } else {
                "gradient distance".to_string()
            };
            match line_chart(&format!("{} ({})", self.name, metric), "epoch", &y, &series) {
                Some(svg) => write_file(
                    &out.join("plots").join(format!("sensitivity_{metric}.svg")),
                    svg.as_bytes(),
                )?,
                None => log::warn!("no data for the {metric} chart, skipped"),
            }
        }
        Ok(())
    }
}
