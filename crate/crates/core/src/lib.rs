//! Triplet-center loss and friends: analytic losses, a small multi-view
//! embedding network, SGD, a synthetic multi-view dataset and retrieval metrics.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the data,
//! retrieval and experiment layers work in `f64`.

pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optim;
pub mod retrieval;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use losses::{CenterBank, EmbeddingBatch, LossConfig, LossKind, LossResult, Reduction, TripletStrategy};
pub use model::{NetworkDims, NetworkParams};
pub use scalar::Scalar;
pub use train::Model;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type CenterBank64 = CenterBank<f64>;
pub type CenterBank32 = CenterBank<f32>;
pub type EmbeddingBatch64 = EmbeddingBatch<f64>;
pub type EmbeddingBatch32 = EmbeddingBatch<f32>;
pub type NetworkParams64 = NetworkParams<f64>;
pub type NetworkParams32 = NetworkParams<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
