//! Experiment runner for explanation stability studies.
//!
//! [`experiment::run_experiment`] sweeps activations, weight decay and shift
//! levels over several seeded trials and writes one JSON record per run plus
//! an aggregated CSV summary. [`sensitivity::run_sensitivity`] tracks
//! retraining epoch by epoch while one hyperparameter varies.

pub mod config;
pub mod experiment;
pub mod plot;
pub mod sensitivity;

pub use config::{ExperimentConfig, Mode, SensitivityConfig};
pub use experiment::{replay, run_experiment, summarize, RunRecord, Summary};
pub use sensitivity::run_sensitivity;

/// Process exit status for each failure class.
pub mod exit {
    use crate::config::ConfigError;
    use crate::experiment::{OutputError, RunFailure};

    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
    pub const IO: i32 = 4;

    fn core_code(e: &xstab_core::Error) -> i32 {
        use xstab_core::Error as E;
        match e {
            E::Divergence { .. } => DIVERGENCE,
            E::Io { .. } | E::Csv { .. } => IO,
            E::Numeric(_) | E::Degenerate(_) => FAILURE,
            _ => CONFIG,
        }
    }

    pub fn code_for(err: &anyhow::Error) -> i32 {
        if let Some(e) = err.downcast_ref::<xstab_core::Error>() {
            return core_code(e);
        }
        if let Some(e) = err.downcast_ref::<RunFailure>() {
            return core_code(&e.source);
        }
        if err.downcast_ref::<ConfigError>().is_some() {
            return CONFIG;
        }
        if err.downcast_ref::<OutputError>().is_some() || err.downcast_ref::<std::io::Error>().is_some() {
            return IO;
        }
        FAILURE
    }
}
