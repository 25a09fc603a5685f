//! Experiment plumbing behind the `awb` binary: dataset preparation,
//! pre-training and adaptation runs with their artifacts, and the metrics
//! table.

pub mod experiment;
pub mod metrics;

pub use experiment::{
    evaluate, generate_data, load_data, run_adapt, run_pretrain, ExperimentData, Labeled, RunOutput,
};
pub use metrics::{metrics_csv, CSV_HEADER};
