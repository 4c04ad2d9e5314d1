use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid velocity domain [{v_min}, {v_max}]: v_min must be below v_max")]
    InvalidDomain { v_min: f64, v_max: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integrand is not finite at v = {node}")]
    NonFiniteIntegrand { node: f64 },

    #[error("density exponent {exponent} at v = {v} saturates exp()")]
    Saturation { v: f64, exponent: f64 },

    #[error("partition function overflows (max exponent {max_exponent}); shift the exponent or shrink the multipliers")]
    PartitionOverflow { max_exponent: f64 },

    #[error("matrix is not positive definite after {retries} jitter retries (last jitter {jitter:e})")]
    IllConditioned { retries: usize, jitter: f64 },

    #[error("Newton iteration did not converge in {iterations} iterations (gradient norm {gradient_norm:e})")]
    NonConvergence { iterations: usize, gradient_norm: f64 },

    #[error("line search stalled after {backtracks} backtracks at iteration {iteration} (gradient norm {gradient_norm:e})")]
    LineSearchStalled {
        iteration: usize,
        backtracks: usize,
        gradient_norm: f64,
    },

    #[error("KL divergence is infinite: reference density positive where model density vanishes (v = {v})")]
    InfiniteDivergence { v: f64 },

    #[error("degenerate moments: central variance {variance} is not positive")]
    DegenerateMoments { variance: f64 },

    #[error("sample generation exhausted after {rejections} rejections (acceptance rate {acceptance_rate:.3e})")]
    GenerationExhausted {
        rejections: usize,
        acceptance_rate: f64,
    },

    #[error("degenerate dataset: column {column} has zero standard deviation")]
    DegenerateDataset { column: String },

    #[error("hyperparameter optimization failed for all starts: {reason}")]
    Optimization { reason: String },

    #[error("output {output}: {source}")]
    Output {
        output: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },

    #[error("reference vector has zero norm")]
    ZeroNorm,

    #[error("BKW solution invalid: K = {k} outside [3/5, 1]")]
    BkwValidity { k: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
