//! Error type shared by all modules of the crate.

use thiserror::Error;

/// Errors produced by scene generation, loss evaluation, and metric code.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A configuration violates one of its documented bounds.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An argument is out of range or shapes disagree.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A pooling mask selects no pixels; the segment cannot be embedded.
    #[error("empty segment mask: {0}")]
    EmptySegment(String),

    /// Attempted to normalize a zero vector.
    #[error("degenerate embedding: cannot normalize a zero-norm vector")]
    DegenerateEmbedding,

    /// Dice of two all-zero inputs is undefined.
    #[error("dice undefined: both inputs are all-zero")]
    UndefinedDice,

    /// Non-finite values where finite ones are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A contrast batch has fewer than two traceable nodes.
    #[error("insufficient contrast batch: {0}")]
    InsufficientBatch(String),

    /// Panoptic maps, registries, or tubes disagree with each other.
    #[error("consistency error: {0}")]
    Inconsistency(String),

    /// A temporal window does not fit in the annotated sequence.
    #[error("window of {window} frames exceeds the {available} annotated frames")]
    Window { window: usize, available: usize },

    /// An instance is too large for the exhaustive matching oracle.
    #[error("instance too large for exhaustive matching: {0}")]
    OracleSize(String),

    /// Training produced a non-finite loss; names the offending component.
    #[error("divergence in {component}: {detail}")]
    Divergence { component: String, detail: String },
}

pub type Result<T> = std::result::Result<T, CoreError>;
