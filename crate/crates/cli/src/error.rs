use cgrpo_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("hash mismatch: {0}")]
    Hash(String),
    #[error("incompatible artifact: {0}")]
    Incompatible(String),
    #[error("{0}")]
    Core(#[from] CoreError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 config, 3 hash or strict-mode mismatch, 4 artifact incompatibility,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Hash(_) => 3,
            CliError::Incompatible(_) => 4,
            CliError::Core(e) => match e {
                CoreError::Config(_) => 2,
                CoreError::HashMismatch { .. } => 3,
                CoreError::Incompatible(_) | CoreError::InvalidVocab(_) | CoreError::Format { .. } => 4,
                _ => 1,
            },
            CliError::Io(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
