use thiserror::Error;

/// Errors raised across the toolkit. Variants map onto CLI exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("solver error: {0}")]
    Solver(String),
    #[error("integrability error: {0}")]
    Integrability(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("degenerate: {0}")]
    Degenerate(String),
    #[error("structure error: {0}")]
    Structure(String),
    #[error("blow-up at particle {particle}, step {step}: {detail}")]
    BlowUp { particle: usize, step: u64, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("scheme error: {0}")]
    Scheme(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the request.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_)
                | Error::Solver(_)
                | Error::Integrability(_)
                | Error::BlowUp { .. }
                | Error::Scheme(_)
                | Error::Domain(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
