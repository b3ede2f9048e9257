use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("mollifier of level k = {k} is under-resolved: need at least {required} grid points on this domain (have {have})")]
    Resolution { k: u32, required: usize, have: usize },

    #[error("numerical instability at step {step}: {detail}")]
    Instability { step: usize, detail: String },

    #[error("positivity violated at frame {frame}, index {index}: value {value}")]
    Positivity { frame: usize, index: usize, value: f64 },

    #[error("Monte Carlo undersampling: {0}")]
    Undersampled(String),

    #[error("quadrature window too small: {0}")]
    Window(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("incompatible noise file: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
