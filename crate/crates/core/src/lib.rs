//! Attention attribution for Vision Transformers.
//!
//! The engine runs a small pre-norm ViT, differentiates the class logit with
//! respect to every attention matrix, and turns attention, transformed-value
//! norms and gradients into per-patch relevance maps. A perturbation harness
//! scores those maps by how quickly masking the top patches degrades the
//! model, and a renderer turns them into heatmap overlays.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix the default `f32` instantiation.

pub mod attribution;
pub mod commands;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod grad;
pub mod image;
pub mod io;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod viz;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Image32 = image::ImageTensor<f32>;
pub type Image64 = image::ImageTensor<f64>;
pub type Weights32 = model::ModelWeights<f32>;
pub type Weights64 = model::ModelWeights<f64>;
pub type Record32 = model::ForwardRecord<f32>;
pub type Record64 = model::ForwardRecord<f64>;
