use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the `ibed` binary, each with a fixed exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("unknown model `{0}` (expected linear, gaussian-linear, pk or oscillatory)")]
    UnknownModel(String),

    #[error("malformed configuration: {0}")]
    Config(String),

    #[error("cannot read {}: {detail}", path.display())]
    MissingInput { path: PathBuf, detail: String },

    #[error(transparent)]
    Core(#[from] ibed_core::Error),

    #[error("i/o failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 unknown model, 3 malformed config, 4 missing input file, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::UnknownModel(_) => 2,
            Self::Config(_) => 3,
            Self::MissingInput { .. } => 4,
            Self::Core(ibed_core::Error::Config(_)) => 3,
            Self::Core(_) | Self::Io { .. } => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
