//! The operator set. Every op is a method on [`crate::Graph`].

pub mod conv;
pub mod elementwise;
pub mod matmul;
pub mod norm;
pub mod reduce;
pub mod resize;
pub mod shape;

pub use elementwise::sigmoid;
pub use norm::{GROUPNORM_EPS, RMSNORM_EPS};
pub use reduce::Reduce;
