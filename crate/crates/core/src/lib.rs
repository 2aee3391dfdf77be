//! Masked point-cloud autoencoder that also learns to predict the positional
//! embeddings of the hidden patch centers.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix the
//! two precisions the crate is used with.

pub mod embedding;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensorcore;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensorcore::Tensor<f32>;
pub type Tensor64 = tensorcore::Tensor<f64>;
pub type Model32 = model::PcpMae<f32>;
pub type Model64 = model::PcpMae<f64>;
