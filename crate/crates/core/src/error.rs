//! Crate-wide error type.
//!
//! Variants are grouped by failure class rather than by module: callers
//! (notably the CLI) map `NonFinite` to a distinct exit code from plain
//! user/config errors, so the class must be recoverable from the variant.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested op.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An API precondition was violated (not a data problem).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// NaN or Inf was produced. `context` narrows down where (block index,
    /// inner-step index, ...).
    #[error("non-finite values in {op}{context}")]
    NonFinite { op: &'static str, context: String },

    /// A vector whose norm falls below the 1e-12 guard was fed to a
    /// similarity computation.
    #[error("degenerate vector in {op}: norm {norm:e} is below 1e-12")]
    Degenerate { op: &'static str, norm: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Corpus file violates the line-oriented schema.
    #[error("corpus parse error at line {line}: {detail}")]
    CorpusParse { line: usize, detail: String },

    /// Episode sampling cannot satisfy the request (too few classes/docs).
    #[error("sampling error: {0}")]
    Sampling(String),

    /// An episode fails the preconditions of adaptation (e.g. a label with
    /// no support sample).
    #[error("bad episode: {0}")]
    Episode(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }

    pub fn non_finite(op: &'static str) -> Self {
        Error::NonFinite { op, context: String::new() }
    }

    pub fn non_finite_in(op: &'static str, context: impl Into<String>) -> Self {
        let c = context.into();
        Error::NonFinite { op, context: format!(" ({c})") }
    }

    /// True for failures that indicate numerical breakdown rather than a
    /// caller mistake. The CLI exits with a dedicated code for these.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Degenerate { .. })
    }
}
