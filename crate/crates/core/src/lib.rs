//! Spiking neural network training with optional 4-bit weight quantization.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine drives
//! leaky integrate-and-fire layers unrolled over time, trained with surrogate
//! gradients, Adam and a choice of learning-rate schedules.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod curves;
pub mod data;
pub mod error;
pub mod matrix;
pub mod model;
pub mod neuron;
pub mod objective;
pub mod optim;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Precision, TrainConfig};
pub use error::{Error, Result};
pub use tensor::Tensor;
pub use train::{run_training, RunOutcome, RunRecord};
