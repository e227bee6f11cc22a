//! Crate-wide error type. `exit_code` maps errors onto the CLI contract:
//! 1 for validation problems, 2 for runtime failures.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {details}")]
    Dim { op: &'static str, details: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("non-finite gradient for parameter '{param}'")]
    NanGradient { param: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dim { .. }
            | Error::Contract(_)
            | Error::Validation(_)
            | Error::Index(_)
            | Error::Format(_)
            | Error::Json(_) => 1,
            Error::NanGradient { .. } | Error::Io(_) => 2,
        }
    }
}
