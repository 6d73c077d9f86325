use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric divergence: {0}")]
    Numeric(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing {artifact}; run `sepsis-rl {stage}` first")]
    MissingStage { artifact: PathBuf, stage: &'static str },

    #[error("checkpoint {}: {source}", path.display())]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Checkpoint { .. } => 3,
            CliError::Numeric(_) => 4,
            CliError::Io { .. } => 5,
            CliError::MissingStage { .. } => 6,
        }
    }
}

impl From<sepsis_rl::Error> for CliError {
    fn from(e: sepsis_rl::Error) -> Self {
        use sepsis_rl::Error as E;
        match e {
            E::Config(m) => CliError::Config(m),
            E::Numeric(m) => CliError::Numeric(m),
            E::Io(source) => CliError::Io {
                path: PathBuf::new(),
                source,
            },
            E::Data(m) => CliError::Data(m),
            other @ (E::Dimension(_) | E::Graph(_)) => CliError::Data(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
