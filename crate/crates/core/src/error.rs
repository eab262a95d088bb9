use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {left} vs {right}")]
    DimensionMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite even with jitter {max_jitter:e}")]
    SingularMatrix { max_jitter: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("eigensolver failed: {0}")]
    Eigen(String),

    #[error("linear solver failed: {0}")]
    Solver(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(context: &'static str, left: usize, right: usize) -> Self {
        Error::DimensionMismatch {
            context,
            left,
            right,
        }
    }

    pub(crate) fn in_layer(self, layer: usize) -> Self {
        Error::Layer {
            layer,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_sample(self, index: usize) -> Self {
        Error::Sample {
            index,
            source: Box::new(self),
        }
    }

    /// True for failures caused by the numbers rather than by the caller.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::SingularMatrix { .. }
            | Error::NonFinite(_)
            | Error::Eigen(_)
            | Error::Solver(_) => true,
            Error::Layer { source, .. } | Error::Sample { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
