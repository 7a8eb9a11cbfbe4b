use thiserror::Error;

/// Errors raised by the inference engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A transition rate was zero, negative or not finite. States are 0-based.
    #[error("invalid transition rate {value} for {from}->{to}")]
    InvalidRate { from: usize, to: usize, value: f64 },

    /// A log-linear predictor produced a rate outside the representable range.
    #[error("rate overflow: linear predictor {predictor} for process {process}, transition {from}->{to}")]
    RateOverflow {
        process: usize,
        from: usize,
        to: usize,
        predictor: f64,
    },

    #[error("validation error: {0}")]
    Validation(String),

    /// A graph is not in the image of the clique expansion.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// A sample sink could not store a record.
    #[error("output error: {0}")]
    Output(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// True for errors caused by bad inputs rather than by a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidRate { .. } | Error::Validation(_) | Error::Structural(_)
        )
    }
}
