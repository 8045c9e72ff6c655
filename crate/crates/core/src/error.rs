use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown parameter handle {0}")]
    UnknownParameter(usize),

    #[error("invalid temperature {0}; must be > 0")]
    InvalidTemperature(f64),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("probe error: {0}")]
    Probe(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("grouping error: {0}")]
    Grouping(String),

    #[error("could not generate a usable task after {attempts} attempts ({params})")]
    UngeneratableTask { attempts: usize, params: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("run failed: {0}")]
    RunFailed(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("inconclusive: {what}; rerun with n_mc >= {suggested_n_mc}")]
    Inconclusive { what: String, suggested_n_mc: usize },

    #[error("verification failed: {0}")]
    VerificationFailed(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
