//! Experiment orchestration: configuration, seeded runs, and the comparison
//! suites built on them.

pub mod config;
pub mod run;
pub mod suites;

pub use config::{DatasetConfig, ExperimentConfig, Variant};
pub use run::{
    load_datasets, make_split, pretrain_encoders, run_experiment, MetricsLog, MetricsRecord, PretrainOutcome,
    RunManifest, StageSelect,
};
pub use suites::*;
