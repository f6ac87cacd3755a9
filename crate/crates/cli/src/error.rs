use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] foodcl_core::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config file: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{what} not found at {path}; {hint}")]
    Missing { what: &'static str, path: PathBuf, hint: &'static str },

    #[error("refusing to merge runs over different datasets: {0}")]
    DatasetMismatch(String),

    #[error("artifact {path} was written by config {found}, expected {expected}")]
    HashMismatch { path: PathBuf, found: String, expected: String },

    #[error("{failed} of {total} jobs failed: {first}")]
    Incomplete { failed: usize, total: usize, first: String },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
