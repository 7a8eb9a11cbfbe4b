use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or configuration.
    #[error("{0}")]
    Usage(String),

    /// Malformed input data; `row` is the 1-based line in the file.
    #[error("{}: row {row}: {msg}", path.display())]
    Data { path: PathBuf, row: u64, msg: String },

    #[error("{}: {msg}", path.display())]
    Input { path: PathBuf, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("chain {chain} stopped at iteration {iteration}: {source}")]
    Chain {
        chain: usize,
        iteration: usize,
        #[source]
        source: sums_core::Error,
    },

    #[error(transparent)]
    Core(#[from] sums_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data { .. } | CliError::Input { .. } => 3,
            CliError::Core(e) | CliError::Chain { source: e, .. } => {
                if e.is_validation() {
                    3
                } else {
                    4
                }
            }
            CliError::Io { .. } => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
