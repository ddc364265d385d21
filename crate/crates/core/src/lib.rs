//! Pyramid self-attention polymerization learning for semi-supervised
//! skeleton-based action recognition.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors with a reverse-mode tape.
//! * [`skeleton`]: sequences, joint/motion modalities, pyramid specs, splits,
//!   and a synthetic action generator.
//! * [`encoder`]: spatial-attention / temporal-convolution feature encoder.
//! * [`ppa`]: skeleton pyramid transform and pyramid polymerizing attention.
//! * [`ccl`]: contrastive projection, NT-Xent, recognition head, total loss.
//! * [`train`]: training loop, evaluation, checkpoints, artifact dumps.

pub mod ccl;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod optim;
pub mod ppa;
pub mod rng;
pub mod skeleton;
pub mod tensor;
pub mod train;

pub use error::{PspError, Result};
pub use rng::RngState;
pub use tensor::{Tape, Tensor, Var};
