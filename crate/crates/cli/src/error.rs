use vos_core::VosError;

/// Failure of a command, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad command line.
    #[error("{0}")]
    Usage(String),
    /// Bad configuration key or value.
    #[error("config error: {0}")]
    Config(String),
    /// Failure while running an otherwise valid command.
    #[error("{0}")]
    Runtime(#[from] VosError),
    /// Runtime failure tied to a file.
    #[error("{}: {source}", path.display())]
    File { path: std::path::PathBuf, source: VosError },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) | CliError::File { .. } => 2,
        }
    }

    pub(crate) fn file(path: &std::path::Path) -> impl FnOnce(VosError) -> Self + '_ {
        move |source| CliError::File { path: path.to_path_buf(), source }
    }
}

/// Treat a core validation failure as a configuration problem.
pub(crate) fn invalid_config(err: VosError) -> CliError {
    CliError::Config(err.to_string())
}
