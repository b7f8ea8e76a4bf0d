use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, flags or inputs.
    #[error("{0}")]
    Validation(String),
    #[error("missing artifact {}; run `competency {producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("artifact {} has format version {found}, but this build reads version {expected}", path.display())]
    VersionMismatch {
        path: PathBuf,
        found: u64,
        expected: u64,
    },
    #[error("working directory {} is locked by another stage (remove {} if it is stale)", dir.display(), lock.display())]
    Locked { dir: PathBuf, lock: PathBuf },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Core(#[from] competency::Error),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// 2 for validation failures, 1 for internal errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Internal(_) => 1,
            CliError::Core(e) => core_exit_code(e),
            _ => 2,
        }
    }
}

fn core_exit_code(e: &competency::Error) -> i32 {
    use competency::Error as E;
    match e {
        E::Stage { source, .. } => core_exit_code(source),
        E::NumericFailure { .. } | E::Io(_) => 1,
        _ => 2,
    }
}
