//! Error type shared across the crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

/// Everything that can go wrong in the numeric core.
///
/// Non-finite values are an error state by contract: every forward op checks
/// its output and refuses to propagate NaN/Inf instead of poisoning the run.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shape disagreement, with the op that noticed.
    Shape { op: &'static str, detail: String },
    /// An op produced or received a NaN/Inf value.
    NonFinite { op: &'static str },
    /// A vector whose norm sits below the 1e-8 floor; zero embeddings
    /// indicate a bug upstream, so this is never silently clamped.
    ZeroNorm { op: &'static str },
    /// An op was asked to reduce over nothing.
    Empty { op: &'static str },
    /// Signal too short for the conv stride stack.
    TooShort { needed: usize, got: usize },
    /// A function handed to the gradient checker returned different values
    /// for identical inputs.
    NonDeterministic { op: &'static str },
    /// Training aborted: the loss went non-finite on these record ids.
    NonFiniteLoss { batch_ids: Vec<String> },
    /// Training aborted: a parameter received a NaN/Inf gradient.
    NonFiniteGrad { param: String },
    /// Conflicting abnormality combination (e.g. two rate classes at once).
    IncompatibleSpec { detail: String },
    /// Catch-all for contract violations with context.
    InvalidArgument(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::NonFinite { op } => write!(f, "{op}: non-finite value"),
            Error::ZeroNorm { op } => write!(f, "{op}: vector norm below 1e-8 floor"),
            Error::Empty { op } => write!(f, "{op}: empty input"),
            Error::TooShort { needed, got } => {
                write!(f, "signal too short: need at least {needed} samples, got {got}")
            }
            Error::NonDeterministic { op } => {
                write!(f, "{op}: function is not deterministic")
            }
            Error::NonFiniteLoss { batch_ids } => {
                write!(f, "non-finite loss; batch ids: {batch_ids:?}")
            }
            Error::NonFiniteGrad { param } => {
                write!(f, "non-finite gradient for parameter `{param}`")
            }
            Error::IncompatibleSpec { detail } => {
                write!(f, "incompatible abnormality combination: {detail}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

impl Error {
    pub fn shape(op: &'static str, detail: impl fmt::Display) -> Self {
        Error::Shape { op, detail: alloc::format!("{detail}") }
    }

    pub fn invalid(msg: impl fmt::Display) -> Self {
        Error::InvalidArgument(alloc::format!("{msg}"))
    }
}
