//! Experiment configuration, data loading and run orchestration.

pub mod config;
pub mod features;
pub mod ingest;
pub mod methods;
pub mod runner;

pub use config::{ExpandingCvSpec, ExperimentConfig, ExperimentKind, RealSpec, RealTask, SyntheticSpec};
pub use features::{build_factor_dataset, build_lag_features, DatedSeries, LagTransform};
pub use ingest::{load_returns_csv, CsvSchema};
pub use methods::{run_method, Method, MethodOutcome, MethodSettings};
pub use runner::{run_expanding_cv, run_experiment, run_synthetic, Experiment};
