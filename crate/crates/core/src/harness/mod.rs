//! Command-level plumbing shared by the CLI and the FFI layer.

pub mod commands;
pub mod config;
pub mod gradcheck;

pub use commands::{run_command, Command, CommandOutput};
pub use config::RunConfig;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Loss(#[from] crate::loss::LossError),
    #[error(transparent)]
    Curation(#[from] crate::curation::CurationError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}
