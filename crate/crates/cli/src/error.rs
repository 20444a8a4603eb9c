use std::path::Path;

use lich_core::error::{
    BackendError, ConfigError, MediatorError, MetricsError, RefinerError, StoreError, TaskFileError,
};

/// Failure classes, each with its own exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("data error: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Data(_) => 4,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Backend(e.to_string()),
        }
    }
}

impl From<TaskFileError> for CliError {
    fn from(e: TaskFileError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MediatorError> for CliError {
    fn from(e: MediatorError) -> Self {
        match e {
            MediatorError::Backend(b) => b.into(),
            MediatorError::Template(_) => CliError::Config(e.to_string()),
            MediatorError::NoUserTurn => CliError::Data(e.to_string()),
        }
    }
}

impl From<RefinerError> for CliError {
    fn from(e: RefinerError) -> Self {
        match e {
            RefinerError::SplitMismatch(_) | RefinerError::ZeroBudget => CliError::Config(e.to_string()),
            RefinerError::Backend(b) => b.into(),
            RefinerError::TaskMismatch(_) | RefinerError::NoPairs => CliError::Data(e.to_string()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io { .. } => CliError::Config(e.to_string()),
            StoreError::Schema(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<lich_entropy::EntropyError> for CliError {
    fn from(e: lich_entropy::EntropyError) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Reads an input file; a missing file is a configuration problem.
pub fn read_input(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

pub fn write_output(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}
