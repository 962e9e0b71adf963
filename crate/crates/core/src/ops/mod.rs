//! Differentiable primitives recorded on a [`Graph`](crate::graph::Graph).

pub mod activation;
pub mod basic;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod resize;
pub mod seq;

pub use conv::Conv3dGeometry;
pub use norm::DEFAULT_EPS as NORM_EPS;
