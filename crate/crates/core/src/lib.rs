//! Discriminative filter learning at desk scale.
//!
//! A small CPU tensor library with reverse-mode gradients, a two-stream
//! network with banks of 1x1 patch-detector filters, the clustering-based
//! filter initialization, training with filter supervision, and analysis
//! tools for the learned detectors.

pub mod autograd;
pub mod dflt;
pub mod data;
pub mod error;
pub mod eval;
pub mod geom;
pub mod gradcheck;
pub mod init;
pub mod kernels;
pub mod netdef;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
