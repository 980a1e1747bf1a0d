//! Runtime for a low-complexity neural audio codec: the decoder/encoder
//! graphs, the long/short-term residual vector quantizer, spectral analysis
//! metrics, and the on-disk weight and bitstream formats.

pub mod error;
pub mod graph;
pub mod io;
pub mod lsrvq;
pub mod metrics;
pub mod num;
pub mod tensor;

pub use error::{Error, Result};
pub use num::Scalar;

/// Default concrete scalar for signal processing. Wire formats always store
/// f32 regardless of the working type.
pub type Sample = f32;
