use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the function.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Data carry too little variation to estimate the requested quantity.
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// An iterative procedure ran out of iterations. `last` holds the final iterate.
    #[error("no convergence after {iterations} iterations: {message}")]
    Convergence {
        iterations: usize,
        message: String,
        last: Vec<f64>,
    },

    #[error("design matrix is rank deficient: column `{column}` is a linear combination of earlier columns")]
    RankDeficient { column: String },

    #[error("sampler initialization failed: {0}")]
    Initialization(String),

    #[error("diagnostics: {0}")]
    Diagnostics(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
