use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("invalid model at `{path}`: {message}")]
    InvalidModel { path: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point is behind camera (z = {0})")]
    BehindCamera(f64),

    #[error("degenerate crop box ({width} x {height})")]
    DegenerateCrop { width: f64, height: f64 },

    #[error("degenerate point configuration: {0}")]
    Degenerate(String),

    #[error("IUV map references part {part} which the model does not define")]
    UnknownPart { part: u8 },

    #[error("non-finite value in objective term `{term}`")]
    NonFinite { term: String },

    #[error("io error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in `{path}`: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("png error in `{path}`: {message}")]
    Png { path: String, message: String },
}

impl Error {
    pub(crate) fn dims(what: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn model(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidModel {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Degenerate(_) | Error::BehindCamera(_)
        )
    }

    /// Short machine-readable code for the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidModel { .. } => "invalid_model",
            Error::InvalidInput(_) => "invalid_input",
            Error::BehindCamera(_) => "behind_camera",
            Error::DegenerateCrop { .. } => "degenerate_crop",
            Error::Degenerate(_) => "degenerate",
            Error::UnknownPart { .. } => "unknown_part",
            Error::NonFinite { .. } => "non_finite",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Png { .. } => "png",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
