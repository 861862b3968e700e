use std::path::PathBuf;

pub type Result<T, E = AsiError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum AsiError {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("degenerate input to {op}: {reason}")]
    Degenerate { op: &'static str, reason: String },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid value for `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("timestep {t} out of range 0..={max}")]
    Index { t: usize, max: usize },
    #[error("alpha_bar at timestep {0} is zero")]
    SingularSchedule(usize),
    #[error("sigma {sigma} too large: 1 - alpha_bar_prev - sigma^2 = {residual}")]
    InvalidSigma { sigma: f64, residual: f64 },
    #[error("malformed tensor dump: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AsiError {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        AsiError::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn config(key: &str, reason: impl Into<String>) -> Self {
        AsiError::Config {
            key: key.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AsiError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user-supplied configuration.
    pub fn is_validation(&self) -> bool {
        matches!(self, AsiError::Config { .. })
    }
}
