use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("output directory {0} is not empty; pass --force to write into it")]
    OutputNotEmpty(PathBuf),
    #[error("{0}")]
    Incompatible(String),
    #[error("self-test failed: {}", .0.join(", "))]
    SelftestFailed(Vec<String>),
    #[error(transparent)]
    Core(#[from] mgdun::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CliError {
    /// Process exit code: 2 for invalid usage, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::OutputNotEmpty(_) => 2,
            _ => 1,
        }
    }
}
