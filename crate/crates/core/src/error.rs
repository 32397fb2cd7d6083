//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shape or axis violation in a tensor operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Non-finite or otherwise out-of-domain input.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Sharding precondition violated (indivisible extent, bad axis).
    #[error("shard error: {0}")]
    Shard(String),

    /// Device mesh larger than the axis being split.
    #[error("mesh error: {0}")]
    Mesh(String),

    /// Structural problem in a computation graph.
    #[error("graph error: {0}")]
    Graph(String),

    /// A chunk plan that breaks a legality rule.
    #[error("plan validation error at node {node}: {reason}")]
    PlanValidation { node: usize, reason: String },

    /// No plan brings the peak under the budget.
    #[error("infeasible budget: {budget} bytes requested, minimum achievable peak is {min_peak} bytes")]
    Infeasible { budget: u64, min_peak: u64 },

    /// Tensor parallelism cannot be scaled past the attention head count.
    #[error("tensor parallelism over {devices} devices exceeds the head-count cap of {heads}")]
    TpScaling { devices: usize, heads: usize },

    /// Timeline with a dependency cycle or dangling reference.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// Malformed serialized document.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
