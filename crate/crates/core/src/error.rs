use thiserror::Error;

/// Errors raised by the estimation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("singular information matrix at site {site}: {detail}")]
    SingularInformation { site: usize, detail: String },

    #[error("no convergence at site {site} after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NonConvergence {
        site: usize,
        iterations: usize,
        grad_norm: f64,
    },

    #[error("separation detected at site {site}: likelihood increases without bound (|theta| = {theta_norm:.3e})")]
    Separation { site: usize, theta_norm: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("message rejected: {0}")]
    Protocol(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable category used by the CLI and FFI layers.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) | Error::Data(_) => "data",
            Error::NonFinite(_) => "numeric",
            Error::SingularInformation { .. } => "singular",
            Error::NonConvergence { .. } | Error::Separation { .. } => "solver",
            Error::Config(_) => "config",
            Error::Protocol(_) => "protocol",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn singular(site: usize, detail: impl Into<String>) -> Self {
        Error::SingularInformation {
            site,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
