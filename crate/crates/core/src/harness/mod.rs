//! Configuration-driven training and evaluation.

pub mod config;
pub mod experiments;
pub mod runlog;
pub mod train;

pub use config::{DataSource, DatasetPath, OptimizerConfig, ProbeSettings, RunConfig};
pub use experiments::{
    compare, missing_modality_eval, sweep_bs_lr, CompareReport, MissingEvalRow, RunSummary,
    StrategySummary, SweepRow,
};
pub use runlog::{EpochRecord, IterRecord, RunLog};
pub use train::{probe_all, train_on, train_run, train_solo, RunOutcome};
