use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use xstab_core::data::{gaussian_shift, synth_two_gaussians, temporal_split, Dataset};
use xstab_core::explain::{explain_rows, ExplainerSpec, Method};
use xstab_core::nn::{ActivationSpec, MlpParams};
use xstab_core::theory::{bound_report, BoundOptions};
use xstab_core::trainer::{fine_tune, train, Architecture, TrainConfig};
use xstab_core::{hungarian_distance, LabelMode};
use xstab_harness::config::{desk_retrain_schedule, ExperimentConfig, SensitivityConfig};
use xstab_harness::experiment::{
    max_metric_difference, read_records, replay, resolve_paths, run_experiment, write_charts, write_file,
    write_outputs, RunRecord, Summary,
};
use xstab_harness::exit;
use xstab_harness::sensitivity::run_sensitivity;

/// Replayed metrics must agree with the record to this absolute tolerance.
const REPLAY_TOLERANCE: f64 = 1e-12;

#[derive(Parser)]
#[command(name = "xstab", version, about = "Explanation stability experiments for small tabular networks")]
struct Cli {
    /// Worker threads for parallel runs (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a two-Gaussian synthetic dataset to CSV.
    Synth(SynthArgs),
    /// Train a model, or fine-tune one with --from.
    Train(TrainArgs),
    /// Apply Gaussian feature noise or a temporal split to a CSV dataset.
    Shift(ShiftArgs),
    /// Optimal-matching distance between two datasets.
    Distance(DistanceArgs),
    /// Attribute model outputs to input features.
    Explain(ExplainArgs),
    /// Evaluate the parameter- and explanation-shift bounds for two models.
    Bounds(BoundsArgs),
    /// Run a multi-trial experiment from a config file.
    Experiment(ExperimentArgs),
    /// Per-epoch retraining curves for one swept hyperparameter.
    Sensitivity(RunArgs),
    /// Recompute one run record and compare metrics.
    Replay(ReplayArgs),
    /// Re-render charts from a summary.json.
    Plot(PlotArgs),
}

#[derive(Args)]
struct DataArgs {
    /// CSV file with numeric features and a 0/1 label column.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "label")]
    label_column: String,
    /// Non-feature column kept as metadata (e.g. a timestamp).
    #[arg(long)]
    meta_column: Option<String>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        Ok(Dataset::load_csv(&self.data, &self.label_column, self.meta_column.as_deref())?)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    d: usize,
    #[arg(long, default_value_t = 2.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.5)]
    balance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// TrainConfig JSON; defaults to the desk retraining schedule.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from this model instead of a fresh initialization.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Comma-separated hidden widths.
    #[arg(long, value_delimiter = ',', default_value = "50,50")]
    hidden: Vec<usize>,
    /// `relu` or `softplus:<beta>`.
    #[arg(long, default_value = "relu", value_parser = parse_activation)]
    activation: ActivationSpec,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Held-out CSV evaluated after every epoch.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Per-epoch loss and accuracy CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ShiftArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, conflicts_with = "threshold")]
    sigma: Option<f64>,
    /// Keep rows with meta value below this as the original set.
    #[arg(long, requires = "original_out")]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shifted (for temporal: full) dataset.
    #[arg(long)]
    out: PathBuf,
    /// Temporal only: the rows below the threshold.
    #[arg(long)]
    original_out: Option<PathBuf>,
}

#[derive(Args)]
struct DistanceArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    other: PathBuf,
    /// Only match rows with equal labels.
    #[arg(long)]
    must_match_labels: bool,
    /// Include the matching permutation in the output.
    #[arg(long)]
    permutation: bool,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "saliency")]
    method: Method,
    /// ExplainerSpec JSON overriding the method defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Row indices to explain (default: all rows).
    #[arg(long, value_delimiter = ',')]
    rows: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelModeArg {
    Ignore,
    MustMatch,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    model_a: PathBuf,
    #[arg(long)]
    model_b: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    shifted: PathBuf,
    #[arg(long)]
    gamma: f64,
    /// Softplus sharpness for the curvature bound (default: the model's).
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_enum, default_value = "ignore")]
    label_mode: LabelModeArg,
    #[arg(long, default_value_t = 9)]
    n_lambda: usize,
    #[arg(long, default_value_t = 1e-4)]
    fd_step: f64,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Retrain,
    FineTune,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in desk-scale config used when no --config is given.
    #[arg(long, value_enum, conflicts_with = "config")]
    preset: Option<Preset>,
    /// Output directory (default: the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReplayArgs {
    /// A record file, or a records/ directory to replay every record in.
    #[arg(long)]
    record: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    summary: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_activation(s: &str) -> std::result::Result<ActivationSpec, String> {
    let spec = match s.split_once(':') {
        None if s == "relu" => ActivationSpec::relu(),
        Some(("softplus", b)) => ActivationSpec::softplus(b.parse().map_err(|_| format!("bad beta `{b}`"))?),
        _ => return Err(format!("expected `relu` or `softplus:<beta>`, got `{s}`")),
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| xstab_core::Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text).map_err(xstab_core::Error::from)?)
}

fn read_model(path: &Path) -> Result<MlpParams> {
    let text = std::fs::read_to_string(path).map_err(|source| xstab_core::Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(MlpParams::from_json(&text)?)
}

fn emit_json(value: &impl serde::Serialize, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(p) => write_file(p, text.as_bytes())?,
        None => {
            let _ = std::io::stdout().lock().write_all(text.as_bytes());
        }
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let ds = synth_two_gaussians(a.n, a.d, a.separation, a.balance, a.seed)?;
    ds.save_csv(&a.out, "label")?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data = a.data.load()?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => desk_retrain_schedule(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let eval = match &a.eval {
        Some(p) => Some(Dataset::load_csv(p, &a.data.label_column, a.data.meta_column.as_deref())?),
        None => None,
    };
    let (params, trace) = match &a.from {
        Some(p) => fine_tune(&read_model(p)?, &data, &cfg, eval.as_ref())?,
        None => {
            let arch = Architecture {
                input_dim: data.d(),
                hidden: a.hidden.clone(),
                activation: a.activation,
            };
            train(&data, &arch, &cfg, eval.as_ref())?
        }
    };
    write_file(&a.out, params.to_json()?.as_bytes())?;
    if let Some(p) = &a.trace {
        let mut buf = Vec::new();
        trace.write_csv(&mut buf)?;
        write_file(p, &buf)?;
    }
    if let Some(l) = trace.final_train_loss() {
        log::info!("final training loss {l}");
    }
    Ok(())
}

fn cmd_shift(a: ShiftArgs) -> Result<()> {
    let data = a.data.load()?;
    match (a.sigma, a.threshold) {
        (Some(s), None) => gaussian_shift(&data, s, a.seed)?.save_csv(&a.out, &a.data.label_column)?,
        (None, Some(t)) => {
            let (orig, full) = temporal_split(&data, t)?;
            full.save_csv(&a.out, &a.data.label_column)?;
            let p = a.original_out.as_ref().expect("clap enforces --original-out");
            orig.save_csv(p, &a.data.label_column)?;
        }
        _ => bail!(xstab_core::Error::Argument("give exactly one of --sigma or --threshold".into())),
    }
    Ok(())
}

fn cmd_distance(a: DistanceArgs) -> Result<()> {
    let d1 = a.data.load()?;
    let d2 = Dataset::load_csv(&a.other, &a.data.label_column, a.data.meta_column.as_deref())?;
    let mode = if a.must_match_labels {
        LabelMode::MustMatch
    } else {
        LabelMode::Ignore
    };
    let mut r = hungarian_distance(&d1, &d2, mode)?;
    if !a.permutation {
        r.permutation.clear();
    }
    emit_json(&r, None)
}

fn cmd_explain(a: ExplainArgs) -> Result<()> {
    let data = a.data.load()?;
    let model = read_model(&a.model)?;
    let spec: ExplainerSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => ExplainerSpec::default_for(a.method),
    };
    let rows: Vec<usize> = a.rows.unwrap_or_else(|| (0..data.n()).collect());
    if let Some(&bad) = rows.iter().find(|&&i| i >= data.n()) {
        bail!(xstab_core::Error::Argument(format!("row {bad} out of range for {} rows", data.n())));
    }
    let background = data.feature_means();
    let attrs = explain_rows(
        &model,
        rows.iter().map(|&i| (i, data.row(i))),
        &spec,
        a.seed,
        Some(&background),
    )?;
    emit_json(&attrs, a.out.as_deref())
}

fn cmd_bounds(a: BoundsArgs) -> Result<()> {
    let d1 = a.data.load()?;
    let d2 = Dataset::load_csv(&a.shifted, &a.data.label_column, a.data.meta_column.as_deref())?;
    let opts = BoundOptions {
        gamma: a.gamma,
        beta: a.beta,
        label_mode: match a.label_mode {
            LabelModeArg::Ignore => LabelMode::Ignore,
            LabelModeArg::MustMatch => LabelMode::MustMatch,
        },
        n_lambda: a.n_lambda,
        fd_step: a.fd_step,
        thm2_samples: a.samples,
        seed: a.seed,
    };
    let r = bound_report(&read_model(&a.model_a)?, &read_model(&a.model_b)?, &d1, &d2, &opts)?;
    emit_json(&r, a.out.as_deref())
}

fn output_dir(flag: Option<PathBuf>, cfg: Option<&PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| cfg.cloned())
        .ok_or_else(|| anyhow::Error::new(xstab_core::Error::Argument("no --out and no output_dir in config".into())))
}

fn cmd_experiment(a: ExperimentArgs) -> Result<()> {
    let (mut cfg, dir) = match (&a.config, a.preset) {
        (Some(p), _) => (ExperimentConfig::from_file(p)?, p.parent().map(Path::to_path_buf)),
        (None, Some(Preset::Retrain)) => (ExperimentConfig::desk_retrain(), None),
        (None, Some(Preset::FineTune)) => (ExperimentConfig::desk_fine_tune(), None),
        (None, None) => unreachable!("clap requires --config or --preset"),
    };
    if let Some(s) = a.seed {
        cfg.master_seed = s;
    }
    resolve_paths(&mut cfg, dir.as_deref());
    let out = output_dir(a.out, cfg.output_dir.as_ref())?;
    let outcome = run_experiment(&cfg)?;
    write_outputs(&out, &cfg, &outcome.records)?;
    if let Some(f) = outcome.failure {
        log::error!("kept {} completed records in {}", outcome.records.len(), out.display());
        return Err(f.into());
    }
    log::info!("wrote {} records to {}", outcome.records.len(), out.display());
    Ok(())
}

fn cmd_sensitivity(a: RunArgs) -> Result<()> {
    let mut cfg = SensitivityConfig::from_file(&a.config)?;
    if let Some(s) = a.seed {
        cfg.master_seed = s;
    }
    if let xstab_harness::config::DatasetSource::Csv { path, .. } = &mut cfg.dataset {
        if let (true, Some(d)) = (path.is_relative(), a.config.parent()) {
            *path = d.join(&*path);
        }
    }
    let out = output_dir(a.out, cfg.output_dir.as_ref())?;
    run_sensitivity(&cfg)?.write(&out)?;
    Ok(())
}

fn cmd_replay(a: ReplayArgs) -> Result<bool> {
    let records: Vec<RunRecord> = if a.record.is_dir() {
        read_records(&a.record)?
    } else {
        vec![read_json(&a.record)?]
    };
    let mut all_ok = true;
    for r in &records {
        let again = replay(r)?;
        let diff = max_metric_difference(r, &again);
        let ok = diff <= REPLAY_TOLERANCE;
        all_ok &= ok;
        let line = format!("{} {} max_abs_diff={diff:e}", if ok { "OK" } else { "MISMATCH" }, r.file_name());
        // a closed pipe (e.g. `| head`) is not an error worth reporting
        if writeln!(std::io::stdout().lock(), "{line}").is_err() {
            break;
        }
    }
    Ok(all_ok)
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let summary: Summary = read_json(&a.summary)?;
    write_charts(&a.out, &summary)?;
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!(xstab_core::Error::Argument("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow::anyhow!("cannot size the worker pool: {e}"))?;
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Shift(a) => cmd_shift(a)?,
        Command::Distance(a) => cmd_distance(a)?,
        Command::Explain(a) => cmd_explain(a)?,
        Command::Bounds(a) => cmd_bounds(a)?,
        Command::Experiment(a) => cmd_experiment(a)?,
        Command::Sensitivity(a) => cmd_sensitivity(a)?,
        Command::Replay(a) => {
            if !cmd_replay(a)? {
                return Ok(exit::FAILURE);
            }
        }
        Command::Plot(a) => cmd_plot(a)?,
    }
    Ok(exit::OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            exit::code_for(&e)
        }
    };
    ExitCode::from(code as u8)
}
