use std::path::PathBuf;

use pillarkit::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 2 config, 3 I/O or unreadable input, 4 failed check, 5 divergence.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::CheckFailed(_) => 4,
            CliError::Core(e) => match e {
                Error::Io { .. }
                | Error::BadLength { .. }
                | Error::NonFinite { .. }
                | Error::ChannelCount { .. }
                | Error::NotSinglePrecision { .. } => 3,
                Error::InvalidSpec(_) | Error::Shape(_) | Error::MapTooLarge(_) | Error::Json(_) => 2,
                Error::TieDetected(_) => 4,
                Error::Diverged { .. } | Error::NonFiniteGradient { .. } => 5,
                _ => 1,
            },
        }
    }
}

pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
