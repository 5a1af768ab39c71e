//! Runnable object-mapping pipeline: simulated smart sensors stream
//! observations over TCP to a backend that fuses, tracks and exports the
//! scene; an evaluator scores runs against the simulator's ground truth.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod backend;
pub mod config;
pub mod pipeline;
pub mod report;
pub mod sensor;
pub mod transport;

pub use config::{Representation, RunConfig, Variant};
pub use pipeline::{run_backend, run_pipeline, run_replay, run_sensor_process, run_sim, RunSummary};
pub use report::run_eval;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Scenario(#[from] objmap_sim::ConfigError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("cannot connect to {addr}: {source}")]
    Connect { addr: String, source: std::io::Error },
    #[error("protocol error: {0}")]
    Protocol(#[from] objmap_core::protocol::ProtocolError),
    #[error(transparent)]
    Replay(#[from] objmap_sim::ReplayError),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing artifacts: {0}")]
    MissingArtifacts(String),
    #[error("malformed artifact {path}: {msg}")]
    BadArtifact { path: PathBuf, msg: String },
    #[error("worker thread failed: {0}")]
    Worker(String),
}

impl AppError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io { path: path.to_path_buf(), source }
    }
}
