//! Experiment harness: brings up brokers, producers and a dataflow for one
//! [`ExperimentSpec`], collects per-second metrics and compares pull and
//! push runs.

mod compare;
mod corpus;
mod fleet;
mod presets;
mod run;
mod spec;

pub use compare::{compare_modes, comparison_table, median, write_comparison_csv, ComparisonRow};
pub use corpus::{generated_corpus, load_corpus, split_records, RecordValues, CORPUS_RECORD_BYTES, GENERATED_CORPUS_BYTES};
pub use fleet::{corpus_records, run_fleet, FleetConfig, FleetValues};
pub use presets::{preset, PRESETS};
pub use run::{
    epoch_ms, instant_from_epoch_ms, read_report_csv, run_experiment, run_experiment_with, steady_p50, fine_p50,
    ExperimentResult, ExperimentRun, RunOptions, BENCH_STREAM,
};
pub use spec::{assign_partitions, expand_matrix, Deployment, ExperimentSpec, SourceMode, ValuesKind, WorkloadKind};

use thiserror::Error;

use crate::broker::BrokerError;
use crate::clients::ClientError;
use crate::pipeline::PipelineError;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error("spec file: {0}")]
    Spec(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("report: {0}")]
    Report(String),
    /// A component failed mid-run; outputs written so far are in the run
    /// directory.
    #[error("{component} failed: {message}")]
    Component { component: String, message: String },
}
