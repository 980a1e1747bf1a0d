//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by kernels, graph assembly, quantization, and the file
/// formats.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter, shape, or dimension does not satisfy an operation's
    /// contract.
    #[error("configuration error: {0}")]
    Config(String),

    /// A convolution would produce zero or negative output frames.
    #[error("degenerate output length: {0}")]
    DegenerateLength(String),

    /// A weight set does not match the layer layout required by a spec.
    /// Carries the offending layer path.
    #[error("weight validation failed at `{path}`: {reason}")]
    Validation { path: String, reason: String },

    /// Codebook fitting cannot proceed (e.g. fewer samples than entries).
    #[error("fitting error: {0}")]
    Fit(String),

    /// A serialized file does not start with the expected magic bytes.
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    /// A serialized file declares a version this build does not read.
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    /// A serialized buffer ends before its declared content.
    #[error("truncated input: {0}")]
    Truncated(String),

    /// A weight file contains the same tensor name twice.
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    /// A tensor's declared shape disagrees with what the caller requires.
    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    /// Structured-text configuration could not be parsed.
    #[error("config parse error: {0}")]
    Parse(String),

    /// A code index or header field cannot be represented in the bitstream.
    #[error("bitstream encoding error: {0}")]
    Encoding(String),

    /// Underlying file I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

}
