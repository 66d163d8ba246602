//! Fine-tuning by growing model capacity.
//!
//! A small feed-forward network is pre-trained on a source task, then adapted
//! to a target task by *growing* it: deepening (a new top layer), widening (a
//! lateral branch concatenated onto an existing layer), or both. Newly added
//! units are rescaled with a learned normalize-and-scale stage so they train
//! at the same pace as the pre-trained ones.
//!
//! Everything is deterministic: one seeded RNG is threaded explicitly through
//! every operation that draws randomness, kernels have a fixed summation
//! order, and checkpoints round-trip bitwise.

pub mod layers;
pub mod network;
pub mod numerics;
pub mod surgery;
pub mod train;

pub mod harness;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible operand shapes; names both sides.
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// Invalid configuration or plan (bad sizes, unknown names, bad fractions).
    #[error("invalid config: {0}")]
    Config(String),

    /// Input outside an operation's domain (bad label, index out of range).
    #[error("domain error: {0}")]
    Domain(String),

    /// Checkpoint written by an incompatible format version.
    #[error("checkpoint version mismatch: expected {expected:?}, found {found:?}")]
    CheckpointVersion { expected: String, found: String },

    /// Checkpoint file cannot be parsed (truncated, garbled, wrong field counts).
    #[error("malformed checkpoint: {0}")]
    CheckpointMalformed(String),

    /// Checkpoint parsed but its declared shapes are mutually inconsistent.
    #[error("checkpoint shape inconsistency: {0}")]
    CheckpointShape(String),

    /// A gradient tensor contained NaN or infinity; training state is unusable.
    #[error("non-finite gradient in tensor {tensor:?} at epoch {epoch}, batch {batch}")]
    NonFiniteGradient {
        tensor: String,
        epoch: usize,
        batch: usize,
    },

    /// Training loss became non-finite; the network was restored to the last
    /// state that completed an epoch.
    #[error("training diverged at epoch {epoch}; network restored to last completed epoch")]
    Diverged { epoch: usize },

    /// An idx file starts with the wrong magic number.
    #[error("idx magic mismatch: expected {expected:#010x}, found {found:#010x}")]
    IdxMagic { expected: u32, found: u32 },

    /// An idx file's header or payload does not have the declared length.
    #[error("malformed idx file: {0}")]
    IdxMalformed(String),

    /// The image and label idx files disagree on the item count.
    #[error("idx count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: impl Into<String>, rhs: impl Into<String>) -> Self {
        Error::Shape {
            op,
            lhs: lhs.into(),
            rhs: rhs.into(),
        }
    }
}
