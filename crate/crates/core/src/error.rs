use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle {angle:.9} rad is too close to pi for the logarithm")]
    SingularRetraction { angle: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("unknown {kind} `{name}`")]
    DanglingReference { kind: &'static str, name: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },

    #[error("constraint block {constraint} is inconsistent or rank deficient (residual {residual:.3e})")]
    RankDeficient { constraint: usize, residual: f64 },

    #[error("mass matrix is not positive definite")]
    SingularInertia,

    #[error("projection onto the constraint manifold failed after {iterations} iterations (residual {residual:.3e})")]
    ProjectionFailed { iterations: usize, residual: f64 },

    #[error("model has no designated serial chain")]
    NoSerialChain,

    #[error("stale dynamics solution: {0}")]
    StaleSolution(String),

    #[error("invalid task: {0}")]
    InvalidTask(String),
}
