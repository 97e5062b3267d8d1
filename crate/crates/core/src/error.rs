//! One error type for the whole crate.  Variants carry enough context that a
//! message alone identifies the failing tensor, file position, or config key.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong outside of plain I/O plumbing.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch between operands; names both shapes and the operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A length or dimension constraint was violated (e.g. sequence too long).
    #[error("invalid length in {what}: got {got}, limit {limit}")]
    Length {
        what: &'static str,
        got: usize,
        limit: usize,
    },

    /// Invalid model, training, or bench configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Text failed to parse (layouts, config files, vocab files).
    #[error("parse error: {0}")]
    Parse(String),

    /// An attention cache was used in a way its contract forbids.
    #[error("attention cache misuse: {0}")]
    Cache(String),

    /// A checkpoint file is malformed, truncated, or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Vocabulary file problems (missing specials, duplicates, unknown ids).
    #[error("vocabulary error: {0}")]
    Vocab(String),

    /// A NaN or infinity appeared in the named tensor.
    #[error("non-finite value in tensor '{0}'")]
    NonFinite(String),

    /// An internal invariant did not hold; indicates a bug, not bad input.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
