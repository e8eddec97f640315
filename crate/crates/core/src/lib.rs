//! Fine-tuning engine for small CNNs with skip-connected low-rank adapters
//! into the output layer, a forward-activation cache, cost accounting and a
//! fixed-point training simulator.

pub mod adapter;
pub mod cache;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fixed;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nf4;
pub mod peft;
pub mod pretrain;
pub mod tensor;

pub use error::{Error, Result};
