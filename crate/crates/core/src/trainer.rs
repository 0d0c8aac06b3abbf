//! Minibatch SGD with coupled weight decay and step learning-rate decay.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fmt::sig;
use crate::nn::{bce_with_logit, ActivationSpec, Dense, MlpParams, ParamGradient, Workspace};
use crate::rng::{derive_seed, rng_from_seed};

/// Input dimension, hidden widths and activation; the output width is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: ActivationSpec,
}

impl Architecture {
    pub fn of(params: &MlpParams) -> Self {
        Self {
            input_dim: params.input_dim(),
            hidden: params.hidden_widths(),
            activation: params.activation(),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplier applied every `decay_step_size` epochs; 1 disables decay.
    pub decay_value: f64,
    pub decay_step_size: usize,
    pub batch_size: usize,
    /// Weight-decay coefficient γ of `ℓ + γ‖θ‖²`.
    pub gamma: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// Keep a parameter snapshot after every epoch.
    #[serde(default)]
    pub record_params: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.2,
            decay_value: 1.0,
            decay_step_size: 1,
            batch_size: 128,
            gamma: 0.001,
            seed: 0,
            shuffle: true,
            record_params: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.decay_value > 0.0 && self.decay_value <= 1.0) {
            return bad(format!("decay value must lie in (0, 1], got {}", self.decay_value));
        }
        if self.decay_step_size == 0 {
            return bad("decay step size must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        Ok(())
    }

    /// `lr · decay^⌊epoch / step⌋` for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = (epoch / self.decay_step_size) as i32;
        self.learning_rate * self.decay_value.powi(k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean data loss over the epoch's minibatches (before each step).
    pub train_loss: f64,
    /// Accuracy of the predictions made during the epoch.
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub params: Option<MlpParams>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    /// CSV with columns `epoch, lr, train_loss, train_acc, test_acc`.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "epoch,lr,train_loss,train_acc,test_acc")?;
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{}",
                e.epoch,
                sig(e.lr, 6),
                sig(e.train_loss, 6),
                sig(e.train_acc, 6),
                e.test_acc.map(|a| sig(a, 6)).unwrap_or_default()
            )?;
        }
        Ok(())
    }
}

/// Weights uniform in `±√(1/fan_in)`, biases zero.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<MlpParams> {
    let mut rng = rng_from_seed(derive_seed(seed, "init", 0));
    let mut layers = Vec::with_capacity(arch.hidden.len() + 1);
    let mut n_in = arch.input_dim;
    for &n_out in arch.hidden.iter().chain(std::iter::once(&1)) {
        let bound = (1.0 / n_in as f64).sqrt();
        let mut l = Dense::zeros(n_in, n_out);
        for w in &mut l.w {
            *w = (2.0 * rng.random::<f64>() - 1.0) * bound;
        }
        layers.push(l);
        n_in = n_out;
    }
    MlpParams::new(layers, arch.activation)
}

/// One step `θ ← θ − lr·(∇ℓ_batch + 2γθ)`.
pub fn sgd_step(params: &MlpParams, batch: &[(&[f64], u8)], lr: f64, gamma: f64) -> Result<MlpParams> {
    if !(lr > 0.0) {
        return Err(Error::Argument(format!("learning rate must be > 0, got {lr}")));
    }
    let grad = params.param_gradient(batch, gamma)?;
    let mut next = params.clone();
    apply_update(&mut next, &grad, lr);
    if !next.all_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            what: "parameters",
        });
    }
    Ok(next)
}

fn apply_update(params: &mut MlpParams, grad: &ParamGradient, lr: f64) {
    for (p, g) in params.layers_mut().iter_mut().zip(&grad.layers) {
        for (w, gw) in p.w.iter_mut().zip(&g.w) {
            *w -= lr * gw;
        }
        for (b, gb) in p.b.iter_mut().zip(&g.b) {
            *b -= lr * gb;
        }
    }
}

fn check_dims(params_dim: usize, data: &Dataset) -> Result<()> {
    if data.d() != params_dim {
        return Err(Error::Shape(format!(
            "dataset has {} features, network expects {params_dim}",
            data.d()
        )));
    }
    Ok(())
}

fn run_sgd(
    mut params: MlpParams,
    data: &Dataset,
    config: &TrainConfig,
    eval: Option<&Dataset>,
) -> Result<(MlpParams, TrainTrace)> {
    config.validate()?;
    check_dims(params.input_dim(), data)?;
    if let Some(e) = eval {
        check_dims(params.input_dim(), e)?;
    }
    let n = data.n();
    let mut ws = Workspace::new(&params);
    let mut grad = ParamGradient::zeros_like(&params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = TrainTrace::default();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        if config.shuffle {
            order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
            order.shuffle(&mut rng_from_seed(derive_seed(config.seed, "shuffle", epoch as u64)));
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            MlpParams::reset_grad(&mut grad);
            for &i in batch {
                let y = data.labels()[i];
                let (l, f) = params.accumulate_loss_grad(data.row(i), y, &mut ws, &mut grad);
                loss_sum += l;
                correct += usize::from(u8::from(f > 0.0) == y);
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grad.layers {
                g.w.iter_mut().for_each(|v| *v *= inv);
                g.b.iter_mut().for_each(|v| *v *= inv);
            }
            params.add_decay(&mut grad, config.gamma);
            apply_update(&mut params, &grad, lr);
        }
        let train_loss = loss_sum / n as f64;
        if !train_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                what: "loss",
            });
        }
        if !params.all_finite() {
            return Err(Error::Divergence {
                epoch,
                what: "parameters",
            });
        }
        trace.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            train_acc: correct as f64 / n as f64,
            test_acc: eval.map(|e| accuracy(&params, e)),
            params: config.record_params.then(|| params.clone()),
        });
    }
    Ok((params, trace))
}

/// Train from `init_params(arch, config.seed)`.
pub fn train(
    data: &Dataset,
    arch: &Architecture,
    config: &TrainConfig,
    eval: Option<&Dataset>,
) -> Result<(MlpParams, TrainTrace)> {
    check_dims(arch.input_dim, data)?;
    run_sgd(init_params(arch, config.seed)?, data, config, eval)
}

/// Continue training from converged parameters on (shifted) data.
pub fn fine_tune(
    base: &MlpParams,
    shifted: &Dataset,
    config: &TrainConfig,
    eval: Option<&Dataset>,
) -> Result<(MlpParams, TrainTrace)> {
    run_sgd(base.clone(), shifted, config, eval)
}

/// Train from scratch on shifted data with the base model's seed, so the
/// initialization and shuffling match the base run.
pub fn retrain(
    base_seed: u64,
    shifted: &Dataset,
    arch: &Architecture,
    config: &TrainConfig,
    eval: Option<&Dataset>,
) -> Result<(MlpParams, TrainTrace)> {
    let config = TrainConfig {
        seed: base_seed,
        ..config.clone()
    };
    train(shifted, arch, &config, eval)
}

pub fn accuracy(params: &MlpParams, data: &Dataset) -> f64 {
    let mut ws = Workspace::new(params);
    let correct = (0..data.n())
        .filter(|&i| u8::from(params.forward_ws(data.row(i), &mut ws) > 0.0) == data.labels()[i])
        .count();
    correct as f64 / data.n() as f64
}

/// Mean unregularized cross-entropy over `data`.
pub fn mean_loss(params: &MlpParams, data: &Dataset) -> f64 {
    let mut ws = Workspace::new(params);
    let total: f64 = (0..data.n())
        .map(|i| bce_with_logit(params.forward_ws(data.row(i), &mut ws), data.labels()[i]))
        .sum();
    total / data.n() as f64
}

/// `(1/n) Σ ℓ + γ‖θ‖²`.
pub fn regularized_loss(params: &MlpParams, data: &Dataset, gamma: f64) -> f64 {
    let norm = params.norm();
    mean_loss(params, data) + gamma * norm * norm
}
