use thiserror::Error;

use crate::domain::Role;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("turn {index}: expected {expected} turn, found {found}")]
    AlternationViolation { index: usize, expected: Role, found: Role },
}

#[derive(Debug, Error, PartialEq)]
pub enum TaskFileError {
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("duplicate task id {0:?}")]
    DuplicateId(String),
    #[error("task {0:?} has no shards")]
    EmptyShards(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("no script rule matched the request")]
    NoRuleMatched,
    #[error("replay cache miss for request digest {digest}")]
    CacheMiss { digest: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum VerifyError {
    #[error("unsupported verifier kind {0}")]
    UnsupportedVerifier(String),
    #[error("external verifier returned non-binary score {0}")]
    NonBinary(f64),
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("score list is empty")]
    EmptyScores,
    #[error("report has no instances to aggregate")]
    EmptyDomain,
    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),
    #[error("reports cover different cells: {0}")]
    CellMismatch(String),
    #[error("invalid report: {0}")]
    InvalidReport(String),
}

/// Errors raised while producing one conversation.
#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("task has {shards} shards but max_turns is {max_turns}")]
    TurnBudgetExceeded { shards: usize, max_turns: usize },
    #[error("arm {0} requires {1}")]
    MissingResource(String, &'static str),
}

/// Batch-level configuration errors. Per-cell failures are recorded in the
/// report instead.
#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("batch has no tasks")]
    EmptyBatch,
    #[error("seed {0} appears more than once")]
    DuplicateSeeds(i64),
    #[error("expected {expected} seeds, got {got}")]
    SeedCount { expected: usize, got: usize },
    #[error("n_runs must be positive")]
    ZeroRuns,
    #[error("task {task} has {shards} shards but max_turns is {max_turns}")]
    TurnBudget { task: String, shards: usize, max_turns: usize },
    #[error("split violation: {0}")]
    Split(String),
    #[error("unknown {kind} {name:?}; known: {known}")]
    Unknown { kind: &'static str, name: String, known: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum MediatorError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("context has no user turn")]
    NoUserTurn,
    #[error("invalid mediator template: {0}")]
    Template(String),
}

impl From<MediatorError> for RunError {
    fn from(e: MediatorError) -> Self {
        match e {
            MediatorError::Backend(b) => RunError::Backend(b),
            other => RunError::MissingResource(other.to_string(), "a valid mediator setup"),
        }
    }
}

#[derive(Debug, Error)]
pub enum RefinerError {
    #[error("split mismatch: {0}")]
    SplitMismatch(String),
    #[error("reports cover different tasks: {0}")]
    TaskMismatch(String),
    #[error("no contrastive pairs given")]
    NoPairs,
    #[error("max_experiences must be positive")]
    ZeroBudget,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error: {0}")]
    Schema(String),
}
