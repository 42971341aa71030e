use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Every problem found in the config, one per entry.
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("missing {what}: {path} (run the stage that produces it or set inputs.{key})")]
    MissingArtifact {
        what: &'static str,
        key: &'static str,
        path: String,
    },
    #[error("output directory {0} is locked by another run")]
    Locked(String),
    #[error(transparent)]
    Core(#[from] icvlab_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for everything that fails at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
