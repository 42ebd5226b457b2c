//! Numerical core for training small convolutional classifiers with
//! adaptive normalization layers under synthetic domain shift.
//!
//! The crate provides dense tensor math with reverse-mode differentiation,
//! the normalization family (batch, group/instance/layer, switchable, and
//! the adaptive standardization/rescaling layer), a pluggable-norm ConvNet,
//! adversarial domain augmentation, a procedural domain-shift benchmark,
//! and the metrics used to compare them.

pub mod augment;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod gradsuite;
pub mod linalg;
pub mod model;
pub mod norms;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Gradients, Reduction, Tape, Var};
pub use tensor::{Matrix, Tensor4};
