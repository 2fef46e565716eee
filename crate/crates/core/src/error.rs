use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data is not informative for uniform stabilization with decay rate {lambda}")]
    NotInformative { lambda: f64 },

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("gain synthesis inconclusive: {0}")]
    SynthesisInconclusive(String),

    #[error("no exact linear fit to the data (residual {residual:e} > {threshold:e})")]
    NoExactFit { residual: f64, threshold: f64 },

    #[error("online regressor kernel has no direction with a nonzero input component")]
    NoExcitationDirection,

    #[error("online data is incompatible with every mode")]
    EmptyMatchSet,

    #[error("could not generate a controllable mode after {0} attempts")]
    GenerationFailed(usize),

    #[error("could not generate exciting initialization data after {0} attempts")]
    ExcitationFailed(usize),

    #[error("timer recurrence violated at t = {t}: {detail}")]
    RecurrenceViolated { t: usize, detail: String },

    #[error("stability condition not satisfied (a = {a})")]
    ConditionUnsatisfied { a: f64 },

    #[error("W-certificate violated at t = {t} (case {case}): {lhs:e} > {rhs:e}")]
    CertificateViolated {
        t: usize,
        case: u8,
        lhs: f64,
        rhs: f64,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
