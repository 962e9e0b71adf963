use thiserror::Error;

/// Every fallible operation in the crate reports one of these.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("non-finite loss at optimization step {step}")]
    NonFiniteLoss {
        step: usize,
        /// L2 norm of every parameter tensor at the failing step.
        param_norms: Vec<(String, f64)>,
    },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable process exit code for the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_) => 10,
            Error::Contract(_) => 11,
            Error::Format { .. } => 12,
            Error::Integrity(_) => 13,
            Error::DegenerateGeometry(_) => 14,
            Error::NonFiniteLoss { .. } => 15,
            Error::GradCheck(_) => 16,
            Error::Io(_) => 20,
            Error::Json(_) => 21,
            Error::Csv(_) => 22,
        }
    }

    /// Short machine-readable name, printed alongside the exit code.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Contract(_) => "contract",
            Error::Format { .. } => "format",
            Error::Integrity(_) => "integrity",
            Error::DegenerateGeometry(_) => "degenerate_geometry",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::GradCheck(_) => "gradcheck",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}

macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}

pub(crate) use {contract_err, dim_err};
