//! Invariant representation learning with cyclically-trained conditional
//! adversarial autoencoders, plus the evaluation machinery around it:
//! latent probes, Generator Label Scores, interpolation and prior sampling.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod format;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod rng;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
