//! Experiment configuration, run drivers, and the reference checks built on them.

pub mod compare;
pub mod config;
pub mod oracle;
pub mod run;
pub mod verify;

use thiserror::Error;

use crate::data::DataError;
use crate::metrics::report::{Report, ReportError};
use crate::model::ModelError;
use crate::protocol::ProtocolError;
use crate::tensor::TensorError;
use crate::transport::TransportError;

pub use config::{derive_seed, DatasetSpec, ExperimentConfig, LinkSpec, OutputSpec};
pub use run::{arch_hash, params_sha256, prepare, run_client, run_experiment, run_prepared, serve, Prepared, RunArtifacts};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("run aborted: {source}")]
    Incomplete { report: Box<Report>, source: Box<RunError> },
}

impl RunError {
    /// Handshake or wire-version rejection by either side.
    pub fn is_rejection(&self) -> bool {
        match self {
            RunError::Protocol(p) => p.is_rejection(),
            RunError::Incomplete { source, .. } => source.is_rejection(),
            _ => false,
        }
    }

    /// Process exit status: 2 for configuration and rejection, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Data(_) | RunError::Model(_) => 2,
            RunError::Incomplete { source, .. } => source.exit_code(),
            e if e.is_rejection() => 2,
            _ => 1,
        }
    }

    /// The partial report of an aborted run.
    pub fn partial_report(&self) -> Option<&Report> {
        match self {
            RunError::Incomplete { report, .. } => Some(report),
            _ => None,
        }
    }
}
