use thiserror::Error;

/// Errors raised by the solver, the verification harness and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    Domain(String),

    #[error("mode count {modes} on axis {axis} exceeds the resolvable limit {limit} for {points} grid intervals")]
    Unresolvable {
        axis: usize,
        modes: usize,
        points: usize,
        limit: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid potential configuration: {0}")]
    Potential(String),

    #[error("non-finite state at t = {time}: {what}")]
    NonFinite { time: f64, what: String },

    #[error("blow-up at step {step} (t = {time}): norm {norm:.3e} exceeds {limit:.3e}")]
    BlowUp {
        step: usize,
        time: f64,
        norm: f64,
        limit: f64,
    },

    #[error("fixed-point iteration did not converge at t = {time} after {iterations} iterations (residual {residual:.3e})")]
    FixedPoint {
        time: f64,
        iterations: usize,
        residual: f64,
    },

    #[error("adjoint solve requires the forward trajectory")]
    MissingForward,

    #[error("time grid mismatch: {0}")]
    TimeGrid(String),

    #[error("invalid control: {0}")]
    Control(String),

    #[error("invalid objective: {0}")]
    Objective(String),

    #[error("line search failed after {0} halvings")]
    LineSearch(usize),

    #[error("invalid check input: {0}")]
    Check(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
