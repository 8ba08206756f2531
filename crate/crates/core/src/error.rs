use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A distribution or model parameter is out of its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An operation was called with inputs that break its contract.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A divergence or log-density was asked for a point outside its domain,
    /// typically an unfloored zero weight.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// Every log-weight was -inf, so there is nothing to resample from.
    #[error("all particle weights are zero")]
    Degenerate,

    #[error("remaining stick length {remaining:e} is too small to rescale weight bounds")]
    DegenerateStick { remaining: f64 },

    #[error("no feasible measure at position {position} after {attempts} attempts (residual gap {gap:e})")]
    Infeasible {
        position: usize,
        attempts: usize,
        gap: f64,
    },

    #[error("particle filter collapsed at phase {phase}: every particle has zero weight")]
    FilterCollapse { phase: usize },

    #[error("similarity graph is disconnected into {} components: {components:?}", components.len())]
    Disconnected { components: Vec<Vec<usize>> },

    #[error("document {index} has zero similarity to every other document")]
    ZeroDegree { index: usize },

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
