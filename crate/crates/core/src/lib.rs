//! Speech denoising with Gaussian-weighted self-attention Transformers.
//!
//! The crate is self-contained: [`tensor`] provides a small reverse-mode
//! autodiff tape over `f64` tensors, and every network in [`attention`],
//! [`encoder`] and [`complex`] is expressed through it so that gradients
//! (including those of the Gaussian attention width) are exact.

pub mod attention;
pub mod checkpoint;
pub mod checks;
pub mod complex;
pub mod config;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
