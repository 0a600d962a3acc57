use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    /// Raised when the Hessian cannot be inverted at the current dampening.
    #[error("hessian is not positive definite at dampening {current_percent}; retry with dampening {suggested_percent}")]
    NeedsDampening {
        current_percent: f64,
        suggested_percent: f64,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt container: {0}")]
    Corruption(String),

    #[error("unsupported container version {0}")]
    Version(u32),

    #[error("validation failed for layer `{layer}`: {reason}")]
    Validation { layer: String, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("budget error: {0}")]
    Budget(String),

    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps an error with the name of the layer being processed.
    pub fn in_layer(self, layer: &str) -> Error {
        match self {
            e @ (Error::Layer { .. } | Error::Validation { .. }) => e,
            e => Error::Layer {
                layer: layer.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// Process exit code for the CLI: 2 validation, 3 numerical, 4 budget, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Validation { .. } | Error::Config(_) => 2,
            Error::NotSymmetric { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::NeedsDampening { .. }
            | Error::Numerical(_) => 3,
            Error::Budget(_) => 4,
            Error::Format(_) | Error::Corruption(_) | Error::Version(_) | Error::Io(_) => 5,
            Error::Layer { source, .. } => source.exit_code(),
        }
    }

    /// Innermost error, skipping layer context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Layer { source, .. } => source.root(),
            e => e,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
