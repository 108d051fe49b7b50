//! Spatial-channel transformer for multi-agent trajectory prediction.
//!
//! Per-agent temporal self-attention (an encoder-decoder transformer) is
//! combined with squeeze-and-excitation attention across agent channels.
//! The crate contains its own small autodiff engine ([`numcore`]), the model
//! blocks, an NGSIM-style data pipeline, training with Adam, ADE/FDE/RMSE
//! evaluation, and an ablation harness.

pub mod error;
pub mod numcore;
pub mod weights;
pub mod blocks;
pub mod embedding;
pub mod se;
pub mod scene;
pub mod model;
pub mod data;
pub mod metrics;
pub mod train;
pub mod ablation;
pub mod container;
pub mod config;

pub use error::{Error, ErrorKind, Result};
