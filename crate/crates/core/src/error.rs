use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// usage problems exit 1, I/O problems exit 2, verification failures exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: String, detail: String },

    #[error("near-singular 1x1 convolution weight ({context}): |det| = {det:.3e} <= 1e-6")]
    SingularWeight { context: String, det: f64 },

    #[error("quality {q} out of range [0, {q_max}]")]
    QualityOutOfRange { q: f64, q_max: u32 },

    #[error("sigma {0} outside coder clamp range [0.04, 256]")]
    SigmaOutOfRange(f64),

    #[error("actnorm used before data-dependent initialization: {0}")]
    ActNormUninitialized(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt bitstream: {0}")]
    CorruptStream(String),

    #[error("model / bitstream config hash mismatch (stream {stream:#018x}, model {model:#018x})")]
    HashMismatch { stream: u64, model: u64 },

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
