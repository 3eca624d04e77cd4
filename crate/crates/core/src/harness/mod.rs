//! Experiment orchestration: configs, the stage pipeline, sweeps, reports,
//! checkpoints and the theory certificate.

pub mod certify;
pub mod checkpoint;
pub mod config;
pub mod pipeline;
pub mod report;
pub mod sweep;

pub use config::{ExperimentConfig, MethodId, SplitKind};
pub use pipeline::{run_pipeline, Experiment, RunReport, StageReport};
