//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An operand had the wrong dimensions or an impossible size.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// A column permutation that is not a bijection on its rows.
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    /// The differentiation root was not a scalar node.
    #[error("invalid root: {0}")]
    InvalidRoot(String),

    /// An element access outside the valid index range.
    #[error("index out of range: {0}")]
    Index(String),

    /// A byte stream did not conform to one of the container formats.
    #[error("format error: {0}")]
    Format(String),

    /// An underlying read or write failed.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A parameter value outside its documented domain.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A computation produced NaN or infinity where finite values are required.
    #[error("numerical fault: {0}")]
    NumericalFault(String),

    /// A phantom element does not fit inside the scanner field of view.
    #[error("field of view exceeded: {0}")]
    FieldOfView(String),

    /// A value range collapsed to a single point where a span is required.
    #[error("degenerate range: {0}")]
    DegenerateRange(String),

    /// A defect mask left no reliable columns to work with.
    #[error("empty mask: {0}")]
    EmptyMask(String),
}
