//! Experiment orchestration, evaluation, metrics and configuration.

pub mod config;
pub mod experiment;
pub mod golden;
pub mod metrics;

pub use config::{load_config, write_config, AggregationWeighting, BackboneInit, DataSource, ExperimentConfig, HeadFeatureSource, TrainConfig};
pub use experiment::{build_dataset, build_partition, evaluate_all, initialize, run_experiment, run_experiment_with, ExperimentOutcome, RunOptions};
pub use golden::{params_checksum, Golden};
pub use metrics::{evaluate_client, write_metrics, write_round_reports, MetricsLog};
