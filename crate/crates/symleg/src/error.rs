//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("rotation axis has (near-)zero length")]
    ZeroAxis,

    #[error("spline evaluated at t = {t} outside [0, {duration}]")]
    SplineDomain { t: f64, duration: f64 },

    #[error("invalid robot definition: {0}")]
    RobotDefinition(String),

    #[error("contact geometry is degenerate: base-row rank {rank} < {required}")]
    DegenerateContact { rank: usize, required: usize },

    #[error("no torque balances the base wrench: {0}")]
    Infeasible(String),

    #[error("foot target unreachable for leg {leg} at t = {t:.3} s")]
    IkUnreachable { leg: usize, t: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("bad configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
