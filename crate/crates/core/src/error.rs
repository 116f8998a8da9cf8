use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("derivative undefined at x = {x} (branch endpoint)")]
    DerivativeUndefined { x: f64 },
    #[error("splitting did not converge at {at:?}: residual {residual:e} > tolerance {tol:e}")]
    NonConvergent { at: Vec<f64>, residual: f64, tol: f64 },
    #[error("construction failed: {0}")]
    ConstructionFailed(String),
    #[error("n = {n} is not a hyperbolic time for the given point")]
    NotHyperbolicTime { n: usize },
    #[error("resolution exceeded: {0}")]
    ResolutionExceeded(String),
    #[error("reference setup search failed: {0}")]
    SearchFailed(String),
    #[error("no crossing within N0 = {n0} for base point {x:?}")]
    NoCrossing { x: Vec<f64>, n0: usize },
    #[error("insufficient tail: {usable} usable points, need at least {needed}")]
    InsufficientTail { usable: usize, needed: usize },
    #[error("degenerate band: epsilon {epsilon} exceeds observable oscillation {oscillation}")]
    DegenerateBand { epsilon: f64, oscillation: f64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("stall: no acceptance for {steps} consecutive steps (last step {last_step}, remaining mass {remaining:e})")]
    Stall { steps: usize, last_step: usize, remaining: f64 },
}

impl Error {
    /// Short machine-readable reason code used in exported failure records.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DerivativeUndefined { .. } => "derivative_undefined",
            Error::NonConvergent { .. } => "non_convergent",
            Error::ConstructionFailed(_) => "construction_failed",
            Error::NotHyperbolicTime { .. } => "not_hyperbolic_time",
            Error::ResolutionExceeded(_) => "resolution_exceeded",
            Error::SearchFailed(_) => "search_failed",
            Error::NoCrossing { .. } => "no_crossing",
            Error::InsufficientTail { .. } => "insufficient_tail",
            Error::DegenerateBand { .. } => "degenerate_band",
            Error::Precondition(_) => "precondition",
            Error::Unsupported(_) => "unsupported",
            Error::Stall { .. } => "stall",
        }
    }
}
