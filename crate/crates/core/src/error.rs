use thiserror::Error;

/// Errors raised by the scheme, the kernel and the run front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("assumption violated at step {t_index}, control {control}: {reason} ({count} offending tuples)")]
    AssumptionViolation {
        t_index: usize,
        control: usize,
        reason: String,
        count: usize,
    },

    #[error("step size h = {h} exceeds h0 = {h0}")]
    StepTooLarge { h: f64, h0: f64 },

    #[error("lift mismatch at step {step} in {quantity}: path value {expected}, lifted value {actual}")]
    LiftMismatch {
        step: usize,
        quantity: &'static str,
        expected: f64,
        actual: f64,
    },

    #[error("non-finite {what} at control index {control}")]
    Evaluation { what: &'static str, control: usize },

    #[error("dimension {dim} unsupported for {what}")]
    DimensionUnsupported { dim: usize, what: &'static str },

    #[error("engine unsupported: {0}")]
    EngineUnsupported(String),

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("transition density is negative (min factor {min_factor:.3e}); step size exceeds h0")]
    NegativeDensity { min_factor: f64 },

    #[error("non-finite regression solution at step {step}")]
    Regression { step: usize },

    #[error("strategy unavailable: {0}")]
    StrategyUnavailable(String),

    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for the errors that mean the step-size/assumption gate refused a run.
    pub fn is_gate(&self) -> bool {
        matches!(
            self,
            Error::AssumptionViolation { .. } | Error::StepTooLarge { .. } | Error::NegativeDensity { .. }
        )
    }

    /// True for failures of the numerics themselves (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Evaluation { .. } | Error::Singular(_) | Error::Regression { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
