use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// The configuration is malformed or fails validation.
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} already exists (pass --force to overwrite)")]
    Exists(PathBuf),
    #[error("{path}: {source}")]
    Load {
        path: PathBuf,
        #[source]
        source: protoseg::Error,
    },
    #[error(transparent)]
    Core(#[from] protoseg::Error),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(protoseg::Error::InvalidConfig(_) | protoseg::Error::InfeasibleSpec(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
