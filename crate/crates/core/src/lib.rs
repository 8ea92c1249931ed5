//! High-order multimodal attention: unary, pairwise and ternary potentials
//! combined by a single mean-field step, tensor-sketch fusion of the attended
//! vectors, and the training/evaluation machinery around them.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decision;
pub mod dropout;
pub mod embed;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod params;
pub mod potentials;
pub mod rng;
pub mod selftest;
pub mod sketch;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{grad_check, Graph, NodeId};
pub use tensor::Tensor;
