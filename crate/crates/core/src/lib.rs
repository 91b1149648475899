//! Progressive domain expansion for single-source domain generalization.
//!
//! A task model (feature extractor, classifier head, unit-norm projection
//! head) is trained on one labeled source domain. Fresh AdaIN autoencoder
//! generators are then trained one at a time against it to synthesize new
//! labeled domains that stay classifiable but are hard to align
//! contrastively. Each synthesized domain joins a growing pool on which the
//! task model is retrained with cross-entropy plus a contrastive term.
//!
//! Everything runs on the CPU in `f64` on top of a small reverse-mode
//! autodiff tape ([`autograd`]).

pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod tensor;

pub use error::{PdenError, Result};
pub use tensor::{Rng, Tensor};
