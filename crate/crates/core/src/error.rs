use thiserror::Error;

/// Errors raised by the controller, simulator and tooling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("assumption {assumption} violated: {detail}")]
    Assumption {
        assumption: &'static str,
        detail: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("compensator state error: {0}")]
    State(String),

    #[error(
        "causality error: step {step} needs {needed} saturated disturbances, {available} available"
    )]
    Causality {
        step: usize,
        needed: usize,
        available: usize,
    },

    #[error("structural error: feedback block ({row}, {col}) lies above the block diagonal")]
    Structure { row: usize, col: usize },

    #[error("scheduling error: {0}")]
    Scheduling(String),

    #[error("ambiguous spectral split: |lambda| = {modulus} is too close to the unit circle to classify")]
    AmbiguousSplit { modulus: f64 },

    #[error("QP infeasible; violated constraint rows {rows:?} (max violation {violation:.3e})")]
    Infeasible { rows: Vec<usize>, violation: f64 },

    #[error("solver error: {0}")]
    Solver(String),

    #[error("stale moment cache: {0}")]
    StaleCache(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dims(what: &str, expected: usize, got: usize) -> Self {
        Error::Config(format!("{what}: expected dimension {expected}, got {got}"))
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse(_) | Error::Scheduling(_) => 2,
            Error::Assumption { .. } | Error::AmbiguousSplit { .. } => 3,
            Error::Infeasible { .. } | Error::Solver(_) => 4,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::StaleCache(_) => 5,
            Error::Protocol(_)
            | Error::State(_)
            | Error::Causality { .. }
            | Error::Structure { .. } => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
