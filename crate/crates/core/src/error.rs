use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed instance, balance, promise table or other caller input.
    #[error("invalid input: {0}")]
    Input(String),

    /// An LP came back infeasible or unbounded where the model guarantees otherwise.
    #[error("solver failure: {0}")]
    Solver(String),

    /// The sandwich approximation detected a sample that breaks concavity.
    #[error("non-concave evaluator: {0}")]
    NonConcave(String),

    #[error("instance too large for the full-history oracle: {histories} histories (limit {limit})")]
    OracleGuard { histories: usize, limit: usize },

    #[error("too many value paths for exhaustive enumeration: {paths} (limit {limit})")]
    EnumerationGuard { paths: usize, limit: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
