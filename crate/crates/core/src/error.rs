use alloc::string::String;
use core::fmt;

/// Errors surfaced by the core algorithms.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A vector had the wrong length for the pool or state it was applied to.
    DimensionMismatch { expected: usize, got: usize },
    /// An operation required a non-empty ensemble mask.
    EmptyMask,
    /// An operation required an ensemble of at least `min` members.
    MaskTooSmall { size: usize, min: usize },
    /// The focal model is not a member of the mask it was scored against.
    FocalNotInMask { focal: usize },
    /// A model index was outside the pool.
    ModelOutOfRange { index: usize, pool: usize },
    /// The failure history holds no rows yet.
    EmptyHistory,
    /// A trajectory with no steps cannot produce returns or updates.
    EmptyTrajectory,
    /// An input collection was empty where at least one element is required.
    EmptyInput,
    /// The pool exceeds what the mask encoding or an enumeration supports.
    PoolTooLarge { n: usize, max: usize },
    /// No cost entry exists for a selected model.
    MissingCost { model: usize },
    /// A state or parameter contained NaN or infinity.
    NonFinite { what: &'static str },
    InvalidConfig(String),
    InvalidRecord(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            Error::EmptyMask => f.write_str("ensemble mask is empty"),
            Error::MaskTooSmall { size, min } => {
                write!(f, "ensemble of size {size} is below the minimum of {min}")
            }
            Error::FocalNotInMask { focal } => {
                write!(f, "focal model {focal} is not a member of the mask")
            }
            Error::ModelOutOfRange { index, pool } => {
                write!(f, "model index {index} out of range for pool of {pool}")
            }
            Error::EmptyHistory => f.write_str("failure history is empty"),
            Error::EmptyTrajectory => f.write_str("trajectory has no steps"),
            Error::EmptyInput => f.write_str("input is empty"),
            Error::PoolTooLarge { n, max } => {
                write!(f, "pool of {n} models exceeds the supported maximum of {max}")
            }
            Error::MissingCost { model } => {
                write!(f, "no cost entry for model {model}")
            }
            Error::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::InvalidRecord(msg) => write!(f, "invalid record: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
