//! Reverse-mode automatic differentiation for small convolutional networks.
//!
//! The engine is deliberately narrow: dense NCHW tensors, square-kernel
//! convolutions, elementwise arithmetic and a handful of fixed linear maps.
//! In exchange it supports gradients of gradients, runs in either `f32` or
//! `f64`, and bounds convolution scratch memory regardless of domain size.

pub mod conv;
pub mod element;
pub mod linear;
pub mod optim;
pub mod tensor;
pub mod var;

pub use conv::ConvGeom;
pub use element::{DType, Element};
pub use linear::{pixel_shuffle, pixel_unshuffle, LinearOp};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;
pub use var::{backward, backward_with_seed, is_recording, no_grad, Gradients, Var};
