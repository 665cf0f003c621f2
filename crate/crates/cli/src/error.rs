use fedasync_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{0}")]
    Failed(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 config, 3 divergence, 4 protocol, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Core(e) if e.is_divergence() => 3,
            CliError::Core(
                CoreError::InvalidArgument(_)
                | CoreError::Parse { .. }
                | CoreError::WeightsFormat(_),
            ) => 2,
            CliError::Core(CoreError::Protocol { .. } | CoreError::FutureUpdate { .. }) => 4,
            _ => 1,
        }
    }
}
