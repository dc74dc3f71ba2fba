use thiserror::Error;

/// Errors produced by the simulation and analysis routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A parameter violated a documented invariant.
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    /// An argument lies outside the domain of a function.
    #[error("domain error in {function}: {reason}")]
    Domain { function: &'static str, reason: String },

    /// The result is not representable as a finite `f64`.
    #[error("overflow in {function} at argument {argument}")]
    Overflow { function: &'static str, argument: f64 },

    /// A series or iteration did not reach the requested tolerance.
    #[error("{function} did not converge after {iterations} iterations")]
    Convergence { function: &'static str, iterations: usize },

    /// Exit problem with an empty interval.
    #[error("degenerate interval: lower = upper = {0}")]
    DegenerateInterval(f64),

    /// A PDE solution left the admissible band of probabilities.
    #[error("PDE solution unstable: value {value} at x = {x}, t = {t}")]
    Instability { value: f64, x: f64, t: f64 },

    /// Query beyond the computed time horizon.
    #[error("time {t} lies beyond the solution horizon {t_max}")]
    Extrapolation { t: f64, t_max: f64 },

    /// A uniform draw fell into CDF mass that the solution does not cover.
    #[error("uniform draw {draw} exceeds covered CDF mass {covered}")]
    TailMass { draw: f64, covered: f64 },

    /// Sample set cannot support the requested estimator.
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field,
            reason: reason.into(),
        }
    }

    /// True for failures caused by bad input rather than numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter { .. } | Error::Domain { .. } | Error::DegenerateInterval(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
