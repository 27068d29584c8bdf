use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 2 for configuration and contract problems, 3 for numerical failures,
    /// 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) | Error::Evaluation(_) | Error::Domain { .. } => 3,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => 4,
            _ => 2,
        }
    }
}
