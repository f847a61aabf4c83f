use std::path::PathBuf;

/// Failures surfaced by the `locate` crate, grouped by the exit code the
/// command line reports for them.
#[derive(Debug, thiserror::Error)]
pub enum LocateError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] locate_core::Error),
}

impl LocateError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// 2 for configuration problems, 3 for data problems, 4 otherwise.
    pub fn exit_code(&self) -> i32 {
        use locate_core::Error as Core;
        match self {
            Self::Config(_) | Self::Core(Core::Config(_) | Core::Capability(_)) => 2,
            Self::Data(_) | Self::Io { .. } => 3,
            Self::Runtime(_) | Self::Core(Core::Shape(_) | Core::Input(_)) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, LocateError>;
