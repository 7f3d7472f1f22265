//! Forward kernels and their vector-Jacobian products. Everything here is a
//! pure function of its arguments; the tape in [`crate::autograd`] wires
//! them together.

pub mod activation;
pub mod attention;
pub mod complex;
pub mod conv;
pub mod fft;
pub mod norm;
pub mod shuffle;

pub use activation::{crelu, gelu, relu};
pub use attention::{head_gram, head_mix, head_scale};
pub use complex::complex_conv2d;
pub use conv::conv2d;
pub use fft::{irfft2, rfft2};
pub use norm::{layer_norm, softmax_lastdim};
pub use shuffle::{pixel_reshuffle, Direction};
