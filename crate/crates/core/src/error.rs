use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("generator violation at {cell}: {detail}")]
    GeneratorViolation { cell: String, detail: String },

    #[error("assumption violation at {cell}: {detail}")]
    AssumptionViolation { cell: String, detail: String },

    #[error("level {level} has {cells} cells, brute-force oracle bound is {bound}")]
    OracleBoundExceeded { level: usize, cells: usize, bound: usize },

    #[error("martingales live on different filtrations")]
    FiltrationMismatch,

    #[error("untagged martingale without a limit oracle: f_inf is not determined by finitely many levels")]
    UndecidableDecomposition,

    #[error("sup norm {norm} must be strictly below 1")]
    NormViolation { norm: String },

    #[error("martingale has no path oracle (untagged input)")]
    MissingPathOracle,

    #[error("invalid move: {0}")]
    InvalidMove(String),

    #[error("anchor norm {norm} at level {level} exceeds 1")]
    NormOverflow { level: usize, norm: String },

    #[error("h is not in the response set: level {level} distance {distance} >= {radius}")]
    NotInResponseSet { level: usize, distance: String, radius: String },

    #[error("witness search exceeded {stages} bookkeeping stages")]
    WitnessBudget { stages: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
