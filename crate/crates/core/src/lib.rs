//! Triple-view semi-supervised segmentation at desk scale.
//!
//! Three encoders (convolutional, transformer, hybrid) each feed a
//! dual-frequency decoder. They are trained jointly with cross pseudo
//! supervision on unlabeled images plus spatial and attention distillation
//! into the hybrid branch, which is the only network used at inference.

pub mod config;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

use thiserror::Error;

pub use tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config key `{key}`: {detail}")]
    Config { key: String, detail: String },
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
