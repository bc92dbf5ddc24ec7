use std::io;
use std::path::{Path, PathBuf};

/// Everything that can go wrong outside the numerical core. Each variant
/// renders as a single line so the CLI can print it after `error:`.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {detail}", path.display())]
    Image { path: PathBuf, detail: String },
    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    #[error("{}: checksum mismatch (stored {stored:08x}, computed {computed:08x})", path.display())]
    Checksum { path: PathBuf, stored: u32, computed: u32 },
    #[error("config line {line}: {detail}")]
    Config { line: usize, detail: String },
    #[error("{0}")]
    Usage(String),
    #[error("missing files: {}", .0.join(", "))]
    MissingFiles(Vec<String>),
    #[error("step {step}: {source}")]
    Step { step: u64, source: relight_core::Error },
    #[error(transparent)]
    Core(#[from] relight_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().to_path_buf(),
            detail: detail.into(),
        }
    }

    pub fn usage(detail: impl Into<String>) -> Self {
        Error::Usage(detail.into())
    }
}
