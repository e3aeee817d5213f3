use std::io;
use std::path::PathBuf;

/// Errors of the command-line layer: everything the core library can raise
/// plus file, image and format problems.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] maskco_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
    #[error("configuration: {0}")]
    Config(String),
    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },
    #[error("dataset: {0}")]
    Dataset(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, msg: impl Into<String>) -> Error {
        Error::Checkpoint { path: path.into(), msg: msg.into() }
    }

    /// Process exit status: 1 for configuration and checkpoint problems, 2 for
    /// dataset problems, 3 for a non-finite loss.
    pub fn exit_code(&self) -> i32 {
        use maskco_core::Error as C;
        match self {
            Error::Core(C::NonFiniteLoss { .. }) => 3,
            Error::Core(C::EmptyDataset | C::Dataset(_)) | Error::Dataset(_) | Error::Image { .. } => 2,
            _ => 1,
        }
    }
}
