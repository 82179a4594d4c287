use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] care_core::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("refusing to overwrite {} (pass --force)", .0.display())]
    Collision(PathBuf),
    #[error("ids without a counterpart: {}", .0.join(", "))]
    Unmatched(Vec<String>),
    #[error("{failed} of {total} gradient checks failed")]
    ChecksFailed { failed: usize, total: usize },
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Core(e.into())
    }
}

impl CliError {
    /// Process exit status: 2 for configuration mistakes, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Core(care_core::Error::Usage(_)) => 2,
            _ => 1,
        }
    }
}
