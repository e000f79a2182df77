//! Conditional denoising-diffusion forecasting for relation-structured stock
//! panels.
//!
//! The pipeline: ingest or synthesize an indicator panel ([`data`]), group
//! inter-stock relations into attention-head masks ([`relations`]), derive an
//! adaptive per-timepoint noise schedule from local variance and intra-cluster
//! alignment ([`noise`]), train a masked relational denoiser ([`denoiser`])
//! under the diffusion objective ([`diffusion`]), and score forecasts with
//! movement metrics, CRPS and a top-k portfolio backtest ([`eval`]).

pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod eval;
pub mod noise;
pub mod relations;
pub mod tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Checkpoint(#[from] tensor::CheckpointError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, Error>;
