//! Minimal f32 tensor algebra with reverse-mode differentiation, a 2-D DCT,
//! Adam, and parameter checkpoints.

pub mod checkpoint;
pub mod dct;
pub mod gradcheck;
pub mod kernels;
pub mod ops;
mod optim;
mod tape;
mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use optim::{Adam, AdamConfig};
pub use tape::{CustomBackward, Gradients, ParamId, ParamStore, Tape, Var};
pub use tensor::Tensor;

/// The generator behind every stochastic op.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with stream identifiers (scene, frame, ...) into an
/// independent child seed.
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    // splitmix64 finaliser
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    stream
        .iter()
        .fold(mix(base.wrapping_add(0x9e37_79b9_7f4a_7c15)), |acc, &s| {
            mix(acc ^ mix(s.wrapping_add(0x9e37_79b9_7f4a_7c15)))
        })
}

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape {shape:?} does not fit {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: String },
    #[error("variable is not recorded on this tape")]
    NotOnTape,
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{0}: {1}")]
    Io(String, String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),
}
