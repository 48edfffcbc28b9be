use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] brainroi_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    InFile { path: PathBuf, source: brainroi_core::Error },
    #[error("{0}")]
    Config(String),
    #[error("missing {what} at {}; {hint}", path.display())]
    Missing { what: &'static str, path: PathBuf, hint: &'static str },
}

impl CliError {
    /// Tag printed in the `error[kind]:` prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::InFile { source, .. } => source.kind(),
            CliError::Io { .. } => "io",
            CliError::Format { .. } => "format",
            CliError::Config(_) => "config",
            CliError::Missing { .. } => "missing-artifact",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        CliError::Format { path: path.into(), reason: reason.into() }
    }
}

pub type CliResult<T> = Result<T, CliError>;
