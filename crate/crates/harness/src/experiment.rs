//! Multi-trial train → shift → retrain/fine-tune → explain → measure runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xstab_core::data::{gaussian_shift, temporal_split, Dataset, Standardizer};
use xstab_core::explain::{explain_rows, ExplainerSpec};
use xstab_core::nn::{ActivationSpec, MlpParams};
use xstab_core::rng::{derive_seed, rng_from_seed};
use xstab_core::stability::{aggregate, gradient_distance, param_distance, topk_means, Aggregate};
use xstab_core::theory::{bound_report, BoundOptions, BoundReport};
use xstab_core::trainer::{accuracy, fine_tune, retrain, train, Architecture, TrainConfig};

use crate::config::{DatasetSource, ExperimentConfig, Mode, ShiftSpec, SCHEMA_VERSION};

/// Cells whose mean test accuracy is further than this from the median cell
/// are flagged in the summary.
pub const ACCURACY_FLAG_GAP: f64 = 0.03;

/// Standardized training and test data. For temporal shifts `train` holds
/// the early rows and `shifted` all training rows.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub temporal_shifted: Option<Dataset>,
}

pub fn split_seed(master: u64) -> u64 {
    derive_seed(master, "split", 0)
}

pub fn base_seed(master: u64, trial: usize) -> u64 {
    derive_seed(master, "trial", trial as u64)
}

pub fn shift_seed(master: u64, trial: usize, shift_index: usize) -> u64 {
    derive_seed(derive_seed(master, "shift", trial as u64), "seed", shift_index as u64)
}

pub fn explain_seed(master: u64, trial: usize, shift_index: usize) -> u64 {
    derive_seed(derive_seed(master, "explain", trial as u64), "seed", shift_index as u64)
}

fn subsample_seed(master: u64, trial: usize) -> u64 {
    derive_seed(master, "subsample", trial as u64)
}

fn thm2_seed(master: u64, trial: usize) -> u64 {
    derive_seed(master, "curvature", trial as u64)
}

/// Split, then standardize with training statistics. Noise is never applied
/// to the test rows.
pub fn prepare_data(
    source: &DatasetSource,
    test_fraction: f64,
    shift: Option<&ShiftSpec>,
    master_seed: u64,
) -> xstab_core::Result<PreparedData> {
    let raw = source.load(None)?;
    let (train_raw, test_raw) = raw.train_test_split(test_fraction, split_seed(master_seed))?;
    match shift {
        Some(ShiftSpec::Temporal { threshold }) => {
            let (early, all) = temporal_split(&train_raw, *threshold)?;
            let st = Standardizer::fit(&early);
            Ok(PreparedData {
                train: st.apply(&early)?,
                test: st.apply(&test_raw)?,
                temporal_shifted: Some(st.apply(&all)?),
            })
        }
        _ => {
            let st = Standardizer::fit(&train_raw);
            Ok(PreparedData {
                train: st.apply(&train_raw)?,
                test: st.apply(&test_raw)?,
                temporal_shifted: None,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellId {
    pub activation: String,
    pub activation_spec: ActivationSpec,
    pub gamma: f64,
    pub shift_kind: String,
    pub shift_value: f64,
    /// Positions in the activation, gamma and shift sweeps.
    pub index: [usize; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub master: u64,
    pub split: u64,
    pub base: u64,
    pub shift: u64,
    pub explain: u64,
}

/// Everything measured for one (cell, trial, shift seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub experiment: String,
    pub mode: Mode,
    pub cell: CellId,
    pub trial: usize,
    pub shift_index: usize,
    pub seeds: RunSeeds,
    pub metrics: BTreeMap<String, f64>,
    pub bounds: Option<BoundReport>,
    /// Full configuration, enough to replay this run alone.
    pub config: ExperimentConfig,
}

impl RunRecord {
    pub fn file_name(&self) -> String {
        let [a, g, s] = self.cell.index;
        format!("a{a}_g{g}_x{s}_t{:03}_s{:02}.json", self.trial, self.shift_index)
    }

    fn sort_key(&self) -> ([usize; 3], usize, usize) {
        (self.cell.index, self.trial, self.shift_index)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("run failed for activation {activation}, gamma {gamma}, trial {trial}: {source}")]
pub struct RunFailure {
    pub activation: String,
    pub gamma: f64,
    pub trial: usize,
    #[source]
    pub source: xstab_core::Error,
}

pub fn metric_sa(method: &str, k: usize) -> String {
    format!("{method}_k{k}_sa")
}

fn cell_id(cfg: &ExperimentConfig, ai: usize, gi: usize, si: usize) -> CellId {
    let act = cfg.model.activations[ai];
    CellId {
        activation: act.label(),
        activation_spec: act,
        gamma: cfg.gammas[gi],
        shift_kind: cfg.shift.axis_label().to_string(),
        shift_value: cfg.shift.levels()[si],
        index: [ai, gi, si],
    }
}

fn arch_for(cfg: &ExperimentConfig, data: &PreparedData, ai: usize) -> Architecture {
    Architecture {
        input_dim: data.train.d(),
        hidden: cfg.model.hidden.clone(),
        activation: cfg.model.activations[ai],
    }
}

fn with_gamma_seed(c: &TrainConfig, gamma: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        gamma,
        seed,
        ..c.clone()
    }
}

fn shifted_data(cfg: &ExperimentConfig, data: &PreparedData, si: usize, seed: u64) -> xstab_core::Result<Dataset> {
    match (&cfg.shift, &data.temporal_shifted) {
        (_, Some(all)) => Ok(all.clone()),
        (ShiftSpec::Gaussian { sigmas }, None) => gaussian_shift(&data.train, sigmas[si], seed),
        (ShiftSpec::Temporal { .. }, None) => unreachable!("temporal data prepared without shifted rows"),
    }
}

fn rows_of<'a>(ds: &'a Dataset, idx: &'a [usize]) -> impl Iterator<Item = (usize, &'a [f64])> + 'a {
    idx.iter().map(move |&i| (i, ds.row(i)))
}

/// Train the base model of one (activation, gamma, trial) group.
fn train_base(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    ai: usize,
    gi: usize,
    trial: usize,
) -> xstab_core::Result<MlpParams> {
    let seed = base_seed(cfg.master_seed, trial);
    let c = with_gamma_seed(&cfg.train, cfg.gammas[gi], seed);
    Ok(train(&data.train, &arch_for(cfg, data, ai), &c, None)?.0)
}

/// Measure one shifted run against an already trained base model.
fn run_shifted(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    base: &MlpParams,
    [ai, gi, si]: [usize; 3],
    trial: usize,
    shift_index: usize,
) -> xstab_core::Result<RunRecord> {
    let master = cfg.master_seed;
    let gamma = cfg.gammas[gi];
    let seeds = RunSeeds {
        master,
        split: split_seed(master),
        base: base_seed(master, trial),
        shift: shift_seed(master, trial, shift_index),
        explain: explain_seed(master, trial, shift_index),
    };
    let shifted = shifted_data(cfg, data, si, seeds.shift)?;
    let arch = arch_for(cfg, data, ai);
    let other = match cfg.mode {
        Mode::Retrain => {
            let c = with_gamma_seed(&cfg.train, gamma, seeds.base);
            retrain(seeds.base, &shifted, &arch, &c, None)?.0
        }
        Mode::FineTune => {
            let ft = cfg.fine_tune.as_ref().expect("validated fine-tune schedule");
            let mut c = with_gamma_seed(ft, gamma, seeds.base);
            if let Some(m) = &cfg.fine_tune_lr_multipliers {
                c.learning_rate *= m[si];
            }
            fine_tune(base, &shifted, &c, None)?.0
        }
    };

    let test = &data.test;
    let mut metrics = BTreeMap::new();
    metrics.insert("param_l2".to_string(), param_distance(base, &other)?);
    metrics.insert("grad_l2".to_string(), gradient_distance(base, &other, test)?);
    metrics.insert("base_test_acc".to_string(), accuracy(base, test));
    metrics.insert("shifted_test_acc".to_string(), accuracy(&other, test));

    if !cfg.explainers.is_empty() {
        let all: Vec<usize> = (0..test.n()).collect();
        let m = cfg.test_subsample.min(test.n());
        let mut sub = sample_indices(&mut rng_from_seed(subsample_seed(master, trial)), test.n(), m).into_vec();
        sub.sort_unstable();
        let background = data.train.feature_means();
        for spec in &cfg.explainers {
            let idx = if spec.is_sampling_based() { &sub } else { &all };
            let bg = matches!(spec, ExplainerSpec::KernelShap(_)).then_some(background.as_slice());
            let a1 = explain_rows(base, rows_of(test, idx), spec, seeds.explain, bg)?;
            let a2 = explain_rows(&other, rows_of(test, idx), spec, seeds.explain, bg)?;
            let name = spec.method().name();
            for &k in &cfg.k_values {
                let s = topk_means(&a1, &a2, k)?;
                metrics.insert(metric_sa(name, k), s.sa);
                metrics.insert(format!("{name}_k{k}_cdc"), s.cdc);
                metrics.insert(format!("{name}_k{k}_ssa"), s.ssa);
            }
        }
    }

    let bounds = match &cfg.bounds {
        Some(b) => {
            let opts = BoundOptions {
                gamma,
                beta: None,
                label_mode: b.label_mode,
                n_lambda: b.n_lambda,
                fd_step: b.fd_step,
                thm2_samples: b.thm2_samples,
                seed: thm2_seed(master, trial),
            };
            let r = bound_report(base, &other, &data.train, &shifted, &opts)?;
            add_bound_metrics(&mut metrics, &r);
            Some(r)
        }
        None => None,
    };

    Ok(RunRecord {
        schema_version: SCHEMA_VERSION,
        experiment: cfg.name.clone(),
        mode: cfg.mode,
        cell: cell_id(cfg, ai, gi, si),
        trial,
        shift_index,
        seeds,
        metrics,
        bounds,
        config: cfg.clone(),
    })
}

fn add_bound_metrics(m: &mut BTreeMap<String, f64>, r: &BoundReport) {
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    m.insert("dataset_distance".into(), r.dataset_distance);
    m.insert("lipschitz_l".into(), r.lipschitz_l);
    if let (Some(b), Some(h)) = (r.thm1_bound, r.holds.thm1) {
        m.insert("thm1_bound".into(), b);
        m.insert("thm1_holds".into(), flag(h));
    }
    m.insert("lemma2_lhs".into(), r.lemma2_lhs);
    m.insert("lemma2_rhs".into(), r.lemma2_rhs);
    m.insert("lemma2_holds".into(), flag(r.holds.lemma2));
    if let (Some(l), Some(rhs), Some(h)) = (r.thm2_lhs, r.thm2_rhs, r.holds.thm2) {
        m.insert("thm2_lhs".into(), l);
        m.insert("thm2_rhs".into(), rhs);
        m.insert("thm2_holds".into(), flag(h));
    }
}

/// Make CSV paths absolute so records replay from any working directory.
pub fn resolve_paths(cfg: &mut ExperimentConfig, config_dir: Option<&Path>) {
    if let DatasetSource::Csv { path, .. } = &mut cfg.dataset {
        if path.is_relative() {
            let joined = match config_dir {
                Some(d) => d.join(&*path),
                None => path.clone(),
            };
            *path = std::path::absolute(&joined).unwrap_or(joined);
        }
    }
}

fn run_group(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    ai: usize,
    gi: usize,
    trial: usize,
) -> Result<Vec<RunRecord>, RunFailure> {
    let fail = |source| RunFailure {
        activation: cfg.model.activations[ai].label(),
        gamma: cfg.gammas[gi],
        trial,
        source,
    };
    let base = train_base(cfg, data, ai, gi, trial).map_err(fail)?;
    let mut out = Vec::new();
    for si in 0..cfg.shift.levels().len() {
        for s in 0..cfg.n_shift_seeds_per_trial {
            out.push(run_shifted(cfg, data, &base, [ai, gi, si], trial, s).map_err(fail)?);
        }
    }
    Ok(out)
}

pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    /// First failure in canonical order, if any group failed.
    pub failure: Option<RunFailure>,
}

/// Run every cell, trial and shift seed. Records come back in canonical
/// order regardless of scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> xstab_core::Result<ExperimentOutcome> {
    let data = prepare_data(&cfg.dataset, cfg.test_fraction, Some(&cfg.shift), cfg.master_seed)?;
    for &k in &cfg.k_values {
        if k > data.train.d() {
            return Err(xstab_core::Error::Argument(format!(
                "k = {k} exceeds the {} features",
                data.train.d()
            )));
        }
    }
    let groups: Vec<(usize, usize, usize)> = (0..cfg.model.activations.len())
        .flat_map(|a| (0..cfg.gammas.len()).flat_map(move |g| (0..cfg.n_trials).map(move |t| (a, g, t))))
        .collect();
    let results: Vec<Result<Vec<RunRecord>, RunFailure>> = groups
        .par_iter()
        .map(|&(a, g, t)| run_group(cfg, &data, a, g, t))
        .collect();
    let mut records = Vec::new();
    let mut failure = None;
    for r in results {
        match r {
            Ok(v) => records.extend(v),
            Err(e) if failure.is_none() => failure = Some(e),
            Err(_) => {}
        }
    }
    records.sort_by_key(RunRecord::sort_key);
    Ok(ExperimentOutcome { records, failure })
}

/// Recompute a single recorded run from its embedded configuration.
pub fn replay(record: &RunRecord) -> xstab_core::Result<RunRecord> {
    let cfg = &record.config;
    let [ai, gi, _] = record.cell.index;
    let data = prepare_data(&cfg.dataset, cfg.test_fraction, Some(&cfg.shift), cfg.master_seed)?;
    let base = train_base(cfg, &data, ai, gi, record.trial)?;
    run_shifted(cfg, &data, &base, record.cell.index, record.trial, record.shift_index)
}

/// Largest absolute metric difference between two records, or infinity when
/// their metric names differ.
pub fn max_metric_difference(a: &RunRecord, b: &RunRecord) -> f64 {
    if a.metrics.keys().ne(b.metrics.keys()) {
        return f64::INFINITY;
    }
    a.metrics
        .iter()
        .zip(b.metrics.values())
        .map(|((_, x), y)| if x == y { 0.0 } else { (x - y).abs() })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: Mode,
    pub activation: String,
    pub gamma: f64,
    pub shift: f64,
    pub n_trials: usize,
    pub accuracy_flag: bool,
    pub metrics: BTreeMap<String, Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub shift_axis: String,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.rows.iter().flat_map(|r| r.metrics.keys().cloned()).collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn row(&self, activation: &str, gamma: f64, shift: f64) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.activation == activation && r.gamma == gamma && r.shift == shift)
    }

    pub fn to_csv(&self) -> String {
        let names = self.metric_names();
        let mut out = format!("mode,activation,gamma,{},n_trials,accuracy_flag", self.shift_axis);
        for n in &names {
            out.push_str(&format!(",{n}_mean,{n}_q25,{n}_q75"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}",
                r.mode.name(),
                r.activation,
                r.gamma,
                r.shift,
                r.n_trials,
                u8::from(r.accuracy_flag)
            ));
            for n in &names {
                match r.metrics.get(n) {
                    Some(a) => out.push_str(&format!(",{},{},{}", a.mean, a.q25, a.q75)),
                    None => out.push_str(",,,"),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per cell: average each metric over a trial's shift seeds, then take the
/// mean and quartiles across trials.
pub fn summarize(records: &[RunRecord]) -> xstab_core::Result<Summary> {
    let mut cells: BTreeMap<[usize; 3], Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        cells.entry(r.cell.index).or_default().push(r);
    }
    let mut rows = Vec::new();
    for recs in cells.values() {
        let mut per_metric: BTreeMap<&str, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
        let mut sorted = recs.clone();
        sorted.sort_by_key(|r| (r.trial, r.shift_index));
        for r in &sorted {
            for (name, &v) in &r.metrics {
                per_metric.entry(name).or_default().entry(r.trial).or_default().push(v);
            }
        }
        let mut metrics = BTreeMap::new();
        for (name, trials) in per_metric {
            let means: Vec<f64> = trials.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
            metrics.insert(name.to_string(), aggregate(&means)?);
        }
        let first = sorted[0];
        let n_trials = sorted.iter().map(|r| r.trial).collect::<std::collections::BTreeSet<_>>().len();
        rows.push(SummaryRow {
            mode: first.mode,
            activation: first.cell.activation.clone(),
            gamma: first.cell.gamma,
            shift: first.cell.shift_value,
            n_trials,
            accuracy_flag: false,
            metrics,
        });
    }
    for key in ["base_test_acc", "shifted_test_acc"] {
        let accs: Vec<f64> = rows.iter().filter_map(|r| r.metrics.get(key).map(|a| a.mean)).collect();
        if accs.is_empty() {
            continue;
        }
        let med = median(accs);
        for r in &mut rows {
            if let Some(a) = r.metrics.get(key) {
                r.accuracy_flag |= (a.mean - med).abs() > ACCURACY_FLAG_GAP;
            }
        }
    }
    let (experiment, shift_axis) = records
        .first()
        .map(|r| (r.experiment.clone(), r.cell.shift_kind.clone()))
        .unwrap_or_default();
    Ok(Summary {
        experiment,
        shift_axis,
        rows,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum OutputError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<(), OutputError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| OutputError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_records(out: &Path, records: &[RunRecord]) -> Result<(), OutputError> {
    for r in records {
        let mut text = serde_json::to_string_pretty(r)?;
        text.push('\n');
        write_file(&out.join("records").join(r.file_name()), text.as_bytes())?;
    }
    Ok(())
}

pub fn write_summary(out: &Path, summary: &Summary) -> Result<(), OutputError> {
    write_file(&out.join("summary.csv"), summary.to_csv().as_bytes())?;
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    write_file(&out.join("summary.json"), text.as_bytes())
}

pub fn read_records(dir: &Path) -> Result<Vec<RunRecord>, OutputError> {
    let rd = std::fs::read_dir(dir).map_err(|source| OutputError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let text = std::fs::read_to_string(&p).map_err(|source| OutputError::Io { path: p.clone(), source })?;
        out.push(serde_json::from_str(&text)?);
    }
    out.sort_by_key(RunRecord::sort_key);
    Ok(out)
}

/// Write config, records, summary and charts for a finished run. Returns the
/// summary of the successful records.
pub fn write_outputs(out: &Path, cfg: &ExperimentConfig, records: &[RunRecord]) -> Result<Option<Summary>, OutputError> {
    let mut text = serde_json::to_string_pretty(cfg)?;
    text.push('\n');
    write_file(&out.join("config.json"), text.as_bytes())?;
    write_records(out, records)?;
    if records.is_empty() {
        return Ok(None);
    }
    let summary = summarize(records).map_err(|e| OutputError::Io {
        path: out.join("summary.csv"),
        source: std::io::Error::other(e.to_string()),
    })?;
    write_summary(out, &summary)?;
    write_charts(out, &summary)?;
    Ok(Some(summary))
}

pub fn write_charts(out: &Path, summary: &Summary) -> Result<(), OutputError> {
    let charts = crate::plot::summary_charts(summary);
    if charts.is_empty() {
        log::warn!("summary has no plottable metrics");
    }
    for (stem, svg) in charts {
        write_file(&out.join("plots").join(format!("{stem}.svg")), svg.as_bytes())?;
    }
    Ok(())
}
