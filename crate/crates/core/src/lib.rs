//! Relation-aware hierarchical attention for multiple-choice video QA with
//! temporal grounding, built on a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod cli;
pub mod data_eval;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod predictor;
pub mod relation_encoder;
pub mod train;

pub use error::{Error, Result};

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
