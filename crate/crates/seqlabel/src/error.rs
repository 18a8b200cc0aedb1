use thiserror::Error;

/// Stable machine-readable codes emitted on stderr by the CLI, one per
/// error family, so scripted harnesses can branch without parsing prose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    Parse,
    Validate,
    Data,
    Numeric,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::Parse => "E_PARSE",
            ErrorCode::Validate => "E_VALIDATE",
            ErrorCode::Data => "E_DATA",
            ErrorCode::Numeric => "E_NUMERIC",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Parse(String),

    #[error("{0}")]
    Validate(String),

    /// The observed data contradicts a structural assumption the estimator
    /// relies on (e.g. a source pair declared independent behaves otherwise).
    #[error("{0}")]
    AssumptionViolation(String),

    /// A fitted joint table disagrees with its own marginals beyond the
    /// hard failure threshold.
    #[error("correlation table for sources ({j}, {k}) on task {task} drifts {deviation:.6} from its marginals")]
    MarginalMismatch {
        j: usize,
        k: usize,
        task: usize,
        deviation: f64,
    },

    #[error("{0}")]
    InsufficientData(String),

    #[error("{0}")]
    DegenerateGold(String),

    #[error("{0}")]
    NotInvertible(String),

    #[error("optimization diverged at epoch {epoch} (loss {loss:.3e})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("{0}")]
    SizeExceeded(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn code(&self) -> ErrorCode {
        match self {
            Error::Parse(_) => ErrorCode::Parse,
            Error::Validate(_) | Error::AssumptionViolation(_) | Error::MarginalMismatch { .. } => {
                ErrorCode::Validate
            }
            Error::InsufficientData(_) | Error::DegenerateGold(_) | Error::Io(_) => ErrorCode::Data,
            Error::NotInvertible(_) | Error::Diverged { .. } | Error::SizeExceeded(_) => {
                ErrorCode::Numeric
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Non-fatal findings surfaced during fitting; callers decide whether to log
/// or collect them.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    /// A probability left [0,1] by less than the clamp tolerance and was
    /// projected back.
    Clamped {
        context: String,
        value: f64,
        excess: f64,
    },
    /// A correlation table was renormalized to match its marginals; the
    /// deviation stayed under the hard failure threshold.
    MarginalAdjusted {
        j: usize,
        k: usize,
        task: usize,
        deviation: f64,
    },
    /// An observable was estimated from fewer items than requested.
    LowSupport {
        context: String,
        support: u64,
        requested: u64,
    },
    /// A magnitude estimate was floored away from zero before taking logs.
    NearZeroAgreement { context: String, value: f64 },
    /// Gradient descent finished its epoch budget above the loss tolerance.
    NotConverged { loss: f64, epochs: usize },
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Warning::Clamped {
                context,
                value,
                excess,
            } => write!(
                f,
                "{context}: probability {value:.6} clamped back into [0, 1] (excess {excess:.2e})"
            ),
            Warning::MarginalAdjusted {
                j,
                k,
                task,
                deviation,
            } => write!(
                f,
                "correlation table for sources ({j}, {k}) on task {task} renormalized toward \
                 its marginals (deviation {deviation:.6})"
            ),
            Warning::LowSupport {
                context,
                support,
                requested,
            } => write!(
                f,
                "{context}: only {support} of {requested} items carried votes"
            ),
            Warning::NearZeroAgreement { context, value } => write!(
                f,
                "{context}: mean agreement product {value:.2e} floored before logs; \
                 its sign carries no information"
            ),
            Warning::NotConverged { loss, epochs } => write!(
                f,
                "gradient descent ended after {epochs} epochs with loss {loss:.3e} still \
                 above tolerance"
            ),
        }
    }
}
