//! Differentiable bi-temporal change detection.
//!
//! A small reverse-mode tape ([`Graph`]) carries a Siamese encoder that fuses
//! a convolutional pyramid with frozen foundation features, a differential
//! transformer decoder with gated top-down fusion, a learnable soft
//! morphology refinement stage, and focal/dice deep supervision.

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod model;
pub mod morphology;
pub mod nn;
pub mod objectives;
pub mod ops;
pub mod param;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{Real, Shape, Tensor};
