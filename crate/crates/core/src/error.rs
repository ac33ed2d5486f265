use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SsftError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SsftError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("entry {name}: shape {found:?} does not match the expected {expected:?}")]
    EntryShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("{op}: index {index} out of range 0..{bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch in {}", .0.display())]
    Checksum(PathBuf),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SsftError {
    pub fn config(msg: impl Into<String>) -> Self {
        SsftError::Config(vec![msg.into()])
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SsftError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input (configs, files) rather than numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            SsftError::Config(_)
                | SsftError::Parse { .. }
                | SsftError::Schema(_)
                | SsftError::Version { .. }
                | SsftError::Checksum(_)
                | SsftError::Shape { .. }
                | SsftError::EntryShape { .. }
        )
    }
}
