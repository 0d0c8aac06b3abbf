//! Explanation stability under dataset shift for small tabular networks.
//!
//! The crate trains multilayer perceptrons with SGD and weight decay,
//! perturbs datasets, measures how far two datasets and two models are
//! apart, explains model predictions with four attribution methods, and
//! scores how much those explanations agree. [`theory`] evaluates bounds
//! linking dataset shift to parameter shift and parameter shift to
//! explanation shift.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod distance;
pub mod error;
pub mod explain;
pub mod fmt;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod stability;
pub mod theory;
pub mod trainer;

pub use data::{Dataset, Standardizer};
pub use distance::{hungarian_distance, LabelMode, MatchingResult};
pub use error::{Error, Result};
pub use explain::{Attribution, ExplainerSpec, Method, TopKSet};
pub use nn::{ActivationKind, ActivationSpec, Dense, MlpParams};
pub use stability::{Aggregate, StabilityReport};
pub use theory::{BoundOptions, BoundReport};
pub use trainer::{Architecture, TrainConfig, TrainTrace};
