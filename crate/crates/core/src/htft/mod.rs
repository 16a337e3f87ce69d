//! Temporal feature transfer: per-step FIFO caches of earlier frames' U-Net
//! features and the cross-attention block that fuses them into the current pass.

mod buffer;
mod fusion;

use thiserror::Error;

use crate::numerics::NumericsError;

pub use buffer::{FeatureFrame, SelectionSet, StreamingBuffer1D, StreamingBuffer2D};
pub use fusion::FusionBlock;

#[derive(Debug, Error)]
pub enum HtftError {
    #[error("out-of-order push: newest time index {newest}, got {got}")]
    OutOfOrder { newest: usize, got: usize },
    #[error("step index {step} out of range for {n_steps} denoising steps")]
    StepOutOfRange { step: usize, n_steps: usize },
    #[error("buffer capacity must be positive")]
    InvalidCapacity,
    #[error("invalid selection set: {0}")]
    InvalidSelection(String),
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
