use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid certificate: {0}")]
    InvalidCertificate(String),

    #[error("non-finite {quantity} at batch element {index}")]
    NonFinite { quantity: &'static str, index: usize },

    #[error("infeasible CBF constraint: {0}")]
    Infeasible(String),

    #[error(
        "insufficient samples: N = {n} and alpha = {alpha} give l = floor((N+1)*alpha) = {l}, \
         but the conformal quantile needs 1 <= l <= N"
    )]
    InsufficientSamples { n: usize, alpha: f64, l: i64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "rejection sampling stalled for the {bucket} bucket: {accepted} accepted out of {drawn} draws \
         (labeling measure below 1e-4)"
    )]
    SamplingStall {
        bucket: &'static str,
        accepted: usize,
        drawn: usize,
    },

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("training diverged: non-finite loss at epoch {epoch} (phase {phase})")]
    Diverged { phase: usize, epoch: usize },

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("cannot parse config: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
