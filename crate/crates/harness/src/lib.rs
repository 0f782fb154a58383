//! Training, evaluation and inference around the change-detection network.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod network;
pub mod optim;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
