//! Single-scan OCTA enhancement and 3-D vessel quantification.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`ops`], [`autograd`], [`gradcheck`]: a small differentiable
//!   kernel with finite-difference verification.
//! * [`blocks`], [`model`], [`checkpoint`], [`trainer`]: the dual-branch
//!   attention / frequency-domain network and its training loop.
//! * [`masf`], [`phantom`], [`metrics`], [`vasc3d`], [`volume`]: volume
//!   preprocessing, synthetic ground truth, quality metrics and skeleton
//!   quantification.

pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod masf;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod phantom;
pub mod tensor;
pub mod trainer;
pub mod vasc3d;
pub mod volume;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{ComplexTensor, Real, Tensor};
