use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] hyatt_core::Error),

    #[error("{path}: {msg}")]
    Io { path: String, msg: String },

    #[error("{path}: {msg}")]
    Json { path: String, msg: String },

    #[error("{path}: {msg}")]
    Image { path: String, msg: String },

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Manifest(String),
}

impl HarnessError {
    /// Short stable identifier used in the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Core(_) => "model",
            HarnessError::Io { .. } => "io",
            HarnessError::Json { .. } => "json",
            HarnessError::Image { .. } => "image",
            HarnessError::Config(_) => "config",
            HarnessError::Manifest(_) => "manifest",
        }
    }

    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        }
    }

    pub(crate) fn json(path: &Path, e: impl std::fmt::Display) -> Self {
        HarnessError::Json {
            path: path.display().to_string(),
            msg: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| HarnessError::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| HarnessError::json(path, e))
}
