//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xstab_core::data::{synth_two_gaussians, Dataset};
use xstab_core::explain::ExplainerSpec;
use xstab_core::nn::ActivationSpec;
use xstab_core::trainer::TrainConfig;
use xstab_core::LabelMode;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic {
        n: usize,
        d: usize,
        separation: f64,
        #[serde(default = "half")]
        label_balance: f64,
        seed: u64,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "label_default")]
        label_column: String,
        #[serde(default)]
        meta_column: Option<String>,
    },
}

fn half() -> f64 {
    0.5
}

fn label_default() -> String {
    "label".into()
}

impl DatasetSource {
    /// The desk-scale default: two Gaussian classes in 20 dimensions.
    pub fn desk() -> Self {
        DatasetSource::Synthetic {
            n: 2000,
            d: 20,
            separation: 2.0,
            label_balance: 0.5,
            seed: 0,
        }
    }

    /// Load or generate the data. Relative CSV paths resolve against `base`.
    pub fn load(&self, base: Option<&Path>) -> xstab_core::Result<Dataset> {
        match self {
            DatasetSource::Synthetic {
                n,
                d,
                separation,
                label_balance,
                seed,
            } => synth_two_gaussians(*n, *d, *separation, *label_balance, *seed),
            DatasetSource::Csv {
                path,
                label_column,
                meta_column,
            } => {
                let path = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                Dataset::load_csv(path, label_column, meta_column.as_deref())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftSpec {
    /// Additive feature noise at each listed standard deviation.
    Gaussian { sigmas: Vec<f64> },
    /// Train on rows whose meta value is below `threshold`, shift to all rows.
    Temporal { threshold: f64 },
}

impl ShiftSpec {
    /// Sweep values used as the x coordinate of a cell.
    pub fn levels(&self) -> Vec<f64> {
        match self {
            ShiftSpec::Gaussian { sigmas } => sigmas.clone(),
            ShiftSpec::Temporal { threshold } => vec![*threshold],
        }
    }

    pub fn axis_label(&self) -> &'static str {
        match self {
            ShiftSpec::Gaussian { .. } => "sigma",
            ShiftSpec::Temporal { .. } => "threshold",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FineTune,
    Retrain,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::FineTune => "fine_tune",
            Mode::Retrain => "retrain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    /// Activation sweep; each entry is its own cell.
    pub activations: Vec<ActivationSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSettings {
    #[serde(default)]
    pub label_mode: LabelMode,
    #[serde(default = "n_lambda_default")]
    pub n_lambda: usize,
    #[serde(default = "fd_step_default")]
    pub fd_step: f64,
    #[serde(default = "thm2_samples_default")]
    pub thm2_samples: usize,
}

fn n_lambda_default() -> usize {
    9
}
fn fd_step_default() -> f64 {
    1e-4
}
fn thm2_samples_default() -> usize {
    2000
}

impl Default for BoundSettings {
    fn default() -> Self {
        Self {
            label_mode: LabelMode::Ignore,
            n_lambda: n_lambda_default(),
            fd_step: fd_step_default(),
            thm2_samples: thm2_samples_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub dataset: DatasetSource,
    #[serde(default = "test_fraction_default")]
    pub test_fraction: f64,
    pub shift: ShiftSpec,
    pub mode: Mode,
    pub model: ModelSpec,
    /// Weight-decay sweep; overrides `gamma` in both training configs.
    pub gammas: Vec<f64>,
    /// Training of the base model, and of the retrained model in retrain
    /// mode. Its `seed` is replaced by the per-trial seed.
    pub train: TrainConfig,
    /// Fine-tuning schedule; required in fine-tune mode.
    #[serde(default)]
    pub fine_tune: Option<TrainConfig>,
    /// Per-σ multipliers of the fine-tuning learning rate, aligned with the
    /// Gaussian sigmas.
    #[serde(default)]
    pub fine_tune_lr_multipliers: Option<Vec<f64>>,
    #[serde(default)]
    pub explainers: Vec<ExplainerSpec>,
    #[serde(default)]
    pub k_values: Vec<usize>,
    pub n_trials: usize,
    #[serde(default = "one")]
    pub n_shift_seeds_per_trial: usize,
    /// Test rows explained by LIME and KernelSHAP, drawn once per run.
    #[serde(default = "subsample_default")]
    pub test_subsample: usize,
    #[serde(default)]
    pub bounds: Option<BoundSettings>,
    pub master_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn test_fraction_default() -> f64 {
    0.2
}
fn one() -> usize {
    1
}
fn subsample_default() -> usize {
    100
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.n_trials == 0 || self.n_shift_seeds_per_trial == 0 {
            return bad("n_trials and n_shift_seeds_per_trial must be >= 1".into());
        }
        if self.gammas.is_empty() || self.model.activations.is_empty() || self.shift.levels().is_empty() {
            return bad("gammas, activations and shift levels must be non-empty".into());
        }
        if self.gammas.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return bad("gammas must be finite and >= 0".into());
        }
        for a in &self.model.activations {
            a.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if self.k_values.contains(&0) {
            return bad("k values must be >= 1".into());
        }
        if !self.explainers.is_empty() && self.k_values.is_empty() {
            return bad("explainers need at least one k value".into());
        }
        if self.test_subsample == 0 {
            return bad("test_subsample must be >= 1".into());
        }
        let mut methods: Vec<&str> = self.explainers.iter().map(|e| e.method().name()).collect();
        methods.sort_unstable();
        if methods.windows(2).any(|w| w[0] == w[1]) {
            return bad("each explainer method may appear once".into());
        }
        match &self.shift {
            ShiftSpec::Gaussian { sigmas } => {
                if sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                    return bad("sigmas must be finite and >= 0".into());
                }
                if let Some(m) = &self.fine_tune_lr_multipliers {
                    if m.len() != sigmas.len() || m.iter().any(|v| v.is_nan() || *v <= 0.0) {
                        return bad("fine_tune_lr_multipliers must be positive, one per sigma".into());
                    }
                }
            }
            ShiftSpec::Temporal { .. } => {
                if self.bounds.is_some() {
                    return bad("bounds need equal-size datasets and are unavailable for temporal shifts".into());
                }
                if self.fine_tune_lr_multipliers.is_some() {
                    return bad("fine_tune_lr_multipliers apply to Gaussian shifts only".into());
                }
                if !matches!(&self.dataset, DatasetSource::Csv { meta_column: Some(_), .. }) {
                    return bad("temporal shifts need a CSV dataset with a meta_column".into());
                }
            }
        }
        match (self.mode, &self.fine_tune) {
            (Mode::FineTune, None) => return bad("fine_tune mode needs a `fine_tune` schedule".into()),
            (_, Some(ft)) => ft.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?,
            _ => {}
        }
        if let Some(b) = &self.bounds {
            if b.n_lambda < 2 || b.fd_step.is_nan() || b.fd_step <= 0.0 || b.thm2_samples < 2 {
                return bad("bounds need n_lambda >= 2, fd_step > 0 and thm2_samples >= 2".into());
            }
        }
        Ok(())
    }

    /// Desk-scale retraining experiment over σ ∈ {0, 0.01, 0.05, 0.1}.
    pub fn desk_retrain() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: "desk-retrain".into(),
            dataset: DatasetSource::desk(),
            test_fraction: 0.2,
            shift: ShiftSpec::Gaussian {
                sigmas: vec![0.0, 0.01, 0.05, 0.1],
            },
            mode: Mode::Retrain,
            model: ModelSpec {
                hidden: vec![50, 50],
                activations: vec![ActivationSpec::relu()],
            },
            gammas: vec![1e-3],
            train: desk_retrain_schedule(),
            fine_tune: None,
            fine_tune_lr_multipliers: None,
            explainers: vec![ExplainerSpec::Saliency],
            k_values: vec![5],
            n_trials: 10,
            n_shift_seeds_per_trial: 1,
            test_subsample: 100,
            bounds: None,
            master_seed: 0,
            output_dir: None,
        }
    }

    /// Desk-scale fine-tuning experiment: a converged base model, then a
    /// short low-rate schedule on the shifted data.
    pub fn desk_fine_tune() -> Self {
        Self {
            name: "desk-fine-tune".into(),
            mode: Mode::FineTune,
            train: desk_base_schedule(),
            fine_tune: Some(desk_fine_tune_schedule()),
            ..Self::desk_retrain()
        }
    }
}

/// Retraining schedule: 30 epochs at lr 0.2, no decay, batch 128.
pub fn desk_retrain_schedule() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        learning_rate: 0.2,
        decay_value: 1.0,
        decay_step_size: 1,
        batch_size: 128,
        gamma: 1e-3,
        seed: 0,
        shuffle: true,
        record_params: false,
    }
}

/// Base schedule for fine-tuning runs: long enough to settle at a minimum.
pub fn desk_base_schedule() -> TrainConfig {
    TrainConfig {
        epochs: 150,
        decay_value: 0.5,
        decay_step_size: 50,
        ..desk_retrain_schedule()
    }
}

pub fn desk_fine_tune_schedule() -> TrainConfig {
    TrainConfig {
        epochs: 20,
        learning_rate: 0.05,
        ..desk_retrain_schedule()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lr,
    LrDecay,
    BatchSize,
    BaseEpochs,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lr => "lr",
            SweepParam::LrDecay => "lr_decay",
            SweepParam::BatchSize => "batch_size",
            SweepParam::BaseEpochs => "base_epochs",
        }
    }

    /// `base` with this hyperparameter set to `value`.
    pub fn apply(self, base: &TrainConfig, value: f64) -> Result<TrainConfig, ConfigError> {
        let mut c = base.clone();
        let as_count = |v: f64| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(ConfigError::Invalid(format!("{} needs a positive integer, got {v}", self.name())))
            }
        };
        match self {
            SweepParam::Lr => c.learning_rate = value,
            SweepParam::LrDecay => c.decay_value = value,
            SweepParam::BatchSize => c.batch_size = as_count(value)?,
            SweepParam::BaseEpochs => c.epochs = as_count(value)?,
        }
        c.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

/// Epoch-by-epoch retraining study of one hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConfig {
    pub schema_version: u32,
    pub name: String,
    pub dataset: DatasetSource,
    #[serde(default = "test_fraction_default")]
    pub test_fraction: f64,
    pub hidden: Vec<usize>,
    pub activation: ActivationSpec,
    /// Shared by the base model and every retrained model; the retrained
    /// models run as many epochs as their base model.
    pub train: TrainConfig,
    #[serde(default = "sigma_default")]
    pub sigma: f64,
    pub sweep: Sweep,
    #[serde(default = "k_default")]
    pub k: usize,
    pub n_trials: usize,
    /// Test rows used for per-epoch metrics; all when absent.
    #[serde(default)]
    pub eval_subsample: Option<usize>,
    pub master_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn sigma_default() -> f64 {
    0.1
}
fn k_default() -> usize {
    5
}

impl SensitivityConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.schema_version != SCHEMA_VERSION {
            return bad("unsupported schema_version");
        }
        if self.n_trials == 0 || self.sweep.values.is_empty() || self.k == 0 {
            return bad("n_trials, k and the sweep values must be non-empty / >= 1");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be finite and >= 0");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0, 1)");
        }
        if self.eval_subsample == Some(0) {
            return bad("eval_subsample must be >= 1");
        }
        self.activation.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for &v in &self.sweep.values {
            self.sweep.param.apply(&self.train, v)?;
        }
        Ok(())
    }

    /// Defaults: lr 0.2, no decay, batch 128, 30 base epochs, σ = 0.1.
    pub fn desk(sweep: Sweep) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: format!("sensitivity-{}", sweep.param.name()),
            dataset: DatasetSource::desk(),
            test_fraction: 0.2,
            hidden: vec![50, 50],
            activation: ActivationSpec::relu(),
            train: desk_retrain_schedule(),
            sigma: 0.1,
            sweep,
            k: 5,
            n_trials: 10,
            eval_subsample: None,
            master_seed: 0,
            output_dir: None,
        }
    }
}
