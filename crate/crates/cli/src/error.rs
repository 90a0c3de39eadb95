use std::path::{Path, PathBuf};

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Incompatible(String),
    #[error(transparent)]
    Core(#[from] qbert_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn parse(path: &Path, line: usize, message: impl Into<String>) -> Self {
        CliError::Parse {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    /// 2 for bad input or configuration, 3 for state that does not fit
    /// together (checkpoint vs config), 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        use qbert_core::Error as E;
        match self {
            CliError::Io { .. } | CliError::Parse { .. } | CliError::Usage(_) => 2,
            CliError::Incompatible(_) => 3,
            CliError::Core(e) => match e {
                E::Incompatible(_) => 3,
                E::Config(_) | E::Input(_) | E::Validation(_) | E::Index { .. } | E::MetricUndefined(_) => 2,
                E::Dimension { .. } | E::Contract(_) => 1,
            },
        }
    }
}
