//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

/// Errors produced by the core pipeline.
///
/// Variants are grouped coarsely; the CLI maps them onto exit codes
/// (data problems, numeric failures, contract violations).
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A file or record did not match its declared schema.
    Schema(String),
    /// A value failed to parse; carries a 1-based row number where known.
    Parse { row: usize, message: String },
    /// Data violated an integrity rule (duplicate ids, dangling edges, ...).
    Integrity(String),
    /// An id or category was not found where it must exist.
    Lookup(String),
    /// Tensor or matrix dimensions do not line up.
    Shape(String),
    /// Invalid configuration value.
    Config(String),
    /// Map matching could not produce a result.
    Match { point: Option<usize>, message: String },
    /// An index was outside its valid range.
    Range(String),
    /// Few-shot sampling could not satisfy the request.
    Sampling(String),
    /// Dataset-level inconsistency (missing labels, empty sets, ...).
    Data(String),
    /// Numerical failure (non-finite values, zero norms, ...).
    Numeric(String),
    /// Description template does not match the aspect structure.
    Template(String),
    /// A frozen-parameter or determinism contract was broken.
    Contract(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Schema(m) => write!(f, "schema error: {m}"),
            Error::Parse { row, message } => write!(f, "parse error at row {row}: {message}"),
            Error::Integrity(m) => write!(f, "integrity error: {m}"),
            Error::Lookup(m) => write!(f, "lookup error: {m}"),
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Match { point, message } => match point {
                Some(i) => write!(f, "match error at point {i}: {message}"),
                None => write!(f, "match error: {message}"),
            },
            Error::Range(m) => write!(f, "range error: {m}"),
            Error::Sampling(m) => write!(f, "sampling error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Template(m) => write!(f, "template error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
        }
    }
}

impl core::error::Error for Error {}
