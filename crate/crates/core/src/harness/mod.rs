//! Configuration, data ingestion and the train → integrate → analyze
//! pipeline behind the `lca` command.

pub mod analyze;
pub mod config;
pub mod data;
pub mod experiment;
pub mod export;
pub mod report;
pub mod run;

pub use analyze::{analyze, analyze_runs, find_lcams, AnalysisReport, AnalyzeInputs, MultiRunReport};
pub use config::{AnalysisConfig, DatasetConfig, LcaConfig, RunConfig, SyntheticSpec, DATA_ROOT_ENV};
pub use data::{gen_synthetic, load_dataset, load_mnist_idx, stratified_indices, Subset};
pub use experiment::{
    preset_arms, run_experiment, ExperimentOptions, ExperimentReport, Preset, RunResult, RunState,
};
pub use export::{export_lcam, export_snapshot, ExportKind};
pub use report::Provenance;
pub use run::{lca, lca_unchecked, train, LcaReport, RunPaths, TrainReport};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_GATE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;
/// Anything else (I/O, format, contract).
pub const EXIT_OTHER: i32 = 1;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::LcaGate { .. } => EXIT_GATE,
        Error::Numeric { .. } => EXIT_NUMERIC,
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_OTHER,
    }
}
