//! Multi-branch transformer trajectory prediction that trains once on
//! several observation lengths and evaluates at any length, together with
//! single-length baselines and length-shift diagnostics.

pub mod backbone;
pub mod cli;
pub mod data;
pub mod distributions;
pub mod eval;
pub mod fln;
pub mod params;
pub mod tensorgrad;
pub mod trainstrat;

pub use backbone::{BackboneConfig, BranchId, BranchLengths, FlnParams, ModelError, Switches};
pub use data::{DataError, Scene};
pub use distributions::DistError;
pub use tensorgrad::{Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
