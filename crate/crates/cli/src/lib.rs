//! Command-line driver for GPHME: training, fold benchmarks, prediction and tree export.

pub mod commands;
pub mod config;
pub mod export;
pub mod predict;

pub use commands::{cmd_benchmark, cmd_train, load_dataset, BenchmarkOutcome, TrainOutcome};
pub use config::{Overrides, RunConfig};
pub use export::{cmd_export_tree, TreeSummary};
pub use predict::{cmd_predict, FeatureInput};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "GPHME_THREADS";
