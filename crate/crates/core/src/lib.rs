//! Two-stage pipeline for patch-level hyperspectral classification:
//! self-supervised contrastive pretraining of a spectral encoder followed
//! by supervised fine-tuning for multi-label or single-label prediction,
//! plus the fully supervised autoencoder baselines and experiment harness.

pub mod baselines;
pub mod classifier;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod npy;
pub mod rng;
pub mod sscl;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Tape, Tensor, TensorId};
