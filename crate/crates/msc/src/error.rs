use std::path::{Path, PathBuf};

/// Categorized failures of the driver; each category maps to an exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] msc_core::Error),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("integrity error in {path}: {detail}")]
    Integrity { path: PathBuf, detail: String },
    #[error("missing dependency: {what} not found at {path} (run `{producer}` first)")]
    Missing { what: &'static str, path: PathBuf, producer: &'static str },
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, detail: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), detail: detail.into() }
    }

    /// Process exit code for the category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Core(msc_core::Error::Config(_)) => 2,
            Error::Missing { .. } => 3,
            Error::Io { .. } => 4,
            Error::Format { .. } | Error::Integrity { .. } => 5,
            Error::Core(msc_core::Error::Diverged { .. }) => 6,
            Error::Core(_) => 7,
        }
    }
}
