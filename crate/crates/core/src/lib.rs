//! Spatial block-masked joint-embedding predictive pre-training for
//! multichannel EEG.
//!
//! The numeric core (tensors, autograd, networks, optimizer) is generic over
//! [`Scalar`]; training runs in `f32`, gradient checks in `f64`.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod finetune;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod montage;
pub mod nets;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod scalar;
pub mod seed;
pub mod stopping;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type Params32 = params::ParamSet<f32>;
pub type Params64 = params::ParamSet<f64>;
pub type Adam32 = optim::Adam<f32>;
pub type TrainState32 = pretrain::TrainState<f32>;
