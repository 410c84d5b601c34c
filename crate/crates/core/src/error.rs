use thiserror::Error;

/// Errors surfaced by the library.
///
/// The CLI maps these onto process exit codes: `Config` -> 2,
/// `Data`/`Io` -> 3, `Divergence` -> 4.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor dimension did not match what an operation requires.
    #[error("{op}: {axis} mismatch (expected {expected}, got {got})")]
    Dim {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    /// An operation was invoked with invalid arguments or state.
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    /// Bad or out-of-range configuration.
    #[error("config: {0}")]
    Config(String),

    /// Bad, missing, or inconsistent data on disk.
    #[error("data: {0}")]
    Data(String),

    /// Training produced a non-finite loss.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn dim(op: &'static str, axis: &'static str, expected: usize, got: usize) -> Self {
        Error::Dim {
            op,
            axis,
            expected,
            got,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
