//! Boosted ensembles of local decision rules with causal regularization
//! for robustness to distribution shift.
//!
//! The pieces, bottom up:
//! - [`data`]: datasets with optional environment and group tags, CSV I/O.
//! - [`rules`]: threshold rules, coverage, equal-frequency bins.
//! - [`causal`]: causal graphs and the invariant feature decomposition.
//! - [`regularize`]: quality measures, soft feature masks, group variance penalties.
//! - [`search`]: beam search over rules.
//! - [`boost`]: the boosting loop and the trained ensemble.
//! - [`datagen`]: synthetic shift benchmarks.
//! - [`eval`]: per-environment reports.
//! - [`repro`]: pinned experiment protocols and named recipes.

pub mod bitmask;
pub mod boost;
pub mod causal;
pub mod datagen;
pub mod data;
pub mod error;
pub mod eval;
pub mod regularize;
pub mod repro;
pub mod rules;
pub mod search;

pub use boost::{train, RegularizerKind, RuleEnsemble, TrainConfig};
pub use causal::{CausalGraph, Decomposition};
pub use data::Dataset;
pub use error::{Error, Result};
pub use rules::Rule;
pub use search::BeamConfig;
