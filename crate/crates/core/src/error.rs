use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid rank {rank}: must lie in 1..={max}")]
    InvalidRank { rank: usize, max: usize },

    #[error("invalid budget: {0}")]
    InvalidBudget(String),

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("line {line}: {message}")]
    Line { line: u64, message: String },

    #[error("model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn in_layer(self, index: usize) -> Self {
        match self {
            e @ Error::Layer { .. } => e,
            other => Error::Layer {
                index,
                source: Box::new(other),
            },
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad arguments or configuration rather than
    /// by a failure during computation.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::InvalidInput(_)
            | Error::InvalidRank { .. }
            | Error::InvalidBudget(_)
            | Error::UnsupportedModel(_)
            | Error::EmptyDataset
            | Error::Parse { .. }
            | Error::Line { .. }
            | Error::Format(_)
            | Error::Io(_)
            | Error::Json(_) => true,
            Error::Layer { source, .. } | Error::Step { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
