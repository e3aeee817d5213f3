use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sampling exhausted after {attempts} attempts: {what}")]
    SamplingExhausted { what: &'static str, attempts: usize },
    #[error("degenerate box ({0})")]
    DegenerateBox(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("feature vector has zero norm")]
    ZeroVector,
    #[error("unknown layer `{0}`")]
    LayerNotFound(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dataset: {0}")]
    Dataset(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::Error::ShapeMismatch(alloc::format!($($arg)*))
    };
}
pub(crate) use shape_err;
