//! Experiment configuration, Monte Carlo sweeps over the schemes, and result files.

pub mod config;
pub mod experiment;
pub mod output;

use thiserror::Error;

pub use config::{load_config, parse_config, ConfigError, ExperimentConfig, Scenario, Scheme, SweepParam};
pub use experiment::{run_experiment, ExperimentRecord, RecordMetadata};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Transcode(#[from] crate::transcoding::TranscodeError),
    #[error(transparent)]
    Realization(#[from] crate::realization::RealizationError),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
