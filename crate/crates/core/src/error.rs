use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum CtfError {
    /// Argument outside the mathematical domain of a function.
    #[error("{func}: {msg}")]
    Domain { func: &'static str, msg: String },

    /// Design columns (plus intercept) are not linearly independent.
    #[error("singular design for {what}")]
    Singular { what: String },

    /// No thresholds satisfy the requested error bound.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// The conditioning set of the conditional index statistic is empty.
    #[error("empty conditioning set for cell {cell}")]
    EmptyConditioning { cell: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Malformed input file; `line` is 1-based.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("replicate {index}: {source}")]
    Replicate {
        index: usize,
        #[source]
        source: Box<CtfError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CtfError {
    pub(crate) fn domain(func: &'static str, msg: impl Into<String>) -> Self {
        CtfError::Domain {
            func,
            msg: msg.into(),
        }
    }

    /// True when the error reflects numerical infeasibility rather than bad input.
    pub fn is_infeasible(&self) -> bool {
        match self {
            CtfError::Infeasible(_) => true,
            CtfError::Replicate { source, .. } => source.is_infeasible(),
            _ => false,
        }
    }
}

pub type Result<T, E = CtfError> = std::result::Result<T, E>;
