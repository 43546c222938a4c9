//! Reproducible experiments: configuration, presets, runs and sweeps.

pub mod config;
pub mod gradcheck;
pub mod preset;
pub mod run;
pub mod sweep;

pub use config::{ExperimentConfig, Method, OptTolMode, Preset};
pub use gradcheck::{gradcheck, GradCheck};
pub use run::{compute, run_experiment, MethodSummary, Outcome, Summary};
pub use sweep::sweep;
