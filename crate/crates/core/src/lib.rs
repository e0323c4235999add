//! Class activation latent mapping (CALM) and its CAM baseline on a small
//! fully-convolutional network, with the training objectives, attribution
//! products, and evaluation protocols needed to compare them.

pub mod attribution;
pub mod axioms;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
