use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("entry {index} is not strictly positive ({value:e})")]
    NonPositiveEntry { index: usize, value: f64 },

    #[error("entry {index} is not finite")]
    NonFinite { index: usize },

    #[error("entries sum to {sum}, outside the renormalization window")]
    NotNormalized { sum: f64 },

    #[error("empty input")]
    Empty,

    #[error("diagonal (consensus) mass is zero; projection undefined")]
    ZeroDiagonalMass,

    #[error("matrix is not symmetric")]
    NotSymmetric,

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("joint size {size} exceeds budget {budget}")]
    BudgetExceeded { size: usize, budget: usize },

    #[error("graph is not a tree")]
    NotATree,

    #[error("invalid structure: {0}")]
    Invalid(String),

    #[error("message underflow on {0}; use the log-domain path")]
    Underflow(String),

    #[error("domain violation at node {node}: {reason}")]
    Domain { node: usize, reason: String },

    #[error("input node {0} has no assigned value")]
    MissingInput(usize),

    #[error("trace does not match graph ({0})")]
    TraceMismatch(String),

    #[error("evidence has empty support for variable {0}")]
    EmptySupport(usize),

    #[error("consensus group with scope {scope:?} has empty common support")]
    EmptyConsensusSupport { scope: Vec<usize> },

    #[error("circuit shares nodes; unroll it first")]
    SharedNodes,

    #[error("graph contains a cycle")]
    Cycle,

    #[error("operation unavailable in this regime: {0}")]
    Unsupported(String),
}
