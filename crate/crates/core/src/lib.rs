//! Multi-instance saliency learning with lower-bounded log-sum-exp pooling.
//!
//! The crate is generic over the scalar type (`f32` or `f64`) through
//! [`scalar::Scalar`]; the aliases below fix it for common use.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pooling;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type TensorF32 = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;
pub type GraphF32 = graph::Graph<f32>;
pub type GraphF64 = graph::Graph<f64>;
pub type ModelF32 = model::Model<f32>;
pub type ModelF64 = model::Model<f64>;
pub type PredictionF32 = model::Prediction<f32>;
pub type PredictionF64 = model::Prediction<f64>;
