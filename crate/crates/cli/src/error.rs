use std::path::PathBuf;

use flowpg_core::FlowError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("output directory {0} is locked by another run (remove the lock file if that run is dead)")]
    Locked(PathBuf),
    #[error("missing or modified files: {}", .0.join(", "))]
    Missing(Vec<String>),
    #[error("checkpoint architecture {checkpoint} does not match configured {configured}")]
    ArchMismatch { checkpoint: String, configured: String },
}

impl CliError {
    /// Stable machine-readable code, printed first on the error line.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Flow(e) => e.code(),
            CliError::Config(_) => "E_CONFIG",
            CliError::Io { .. } => "E_IO",
            CliError::Locked(_) => "E_LOCKED",
            CliError::Missing(_) => "E_MISSING",
            CliError::ArchMismatch { .. } => "E_ARCH",
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> CliResult<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> CliResult<T> {
        self.map_err(|source| CliError::Io { path: path.into(), source })
    }
}
