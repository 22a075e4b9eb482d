use thiserror::Error;

pub type Result<T> = std::result::Result<T, PrgpError>;

#[derive(Debug, Error)]
pub enum PrgpError {
    #[error("input domain error: {0}")]
    InputDomain(String),

    #[error("kernel matrix is ill-conditioned; Cholesky failed with jitter {jitter:e}")]
    IllConditioned { jitter: f64 },

    #[error("internal state error: {0}")]
    InternalState(String),

    #[error("model domain error: {0}")]
    ModelDomain(String),

    #[error("schema error: missing required column `{0}`")]
    Schema(String),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("calibration failed: {message}\n{trace}")]
    Calibration { message: String, trace: String },

    #[error("regularizer degeneracy: equation {equation} masked {masked} of {total} residuals")]
    RegularizerDegeneracy {
        equation: String,
        masked: usize,
        total: usize,
    },

    #[error("non-finite objective at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("plot error: {0}")]
    Plot(String),
}

impl PrgpError {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        PrgpError::InputDomain(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        PrgpError::ModelDomain(msg.into())
    }
}
