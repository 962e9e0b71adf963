//! Hybrid CNN + selective state space network for implant position and
//! slope prediction on volumetric scans, built on a small reverse-mode
//! autodiff engine.

// Negated float comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablate;
pub mod bench;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
mod linalg;
pub mod mamba;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod parallel;
pub mod params;
pub mod phantom;
pub mod scan;
pub mod serialize;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{DType, Scalar, Tensor};
