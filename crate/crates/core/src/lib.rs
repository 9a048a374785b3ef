//! Masked video autoencoding with a learned, adaptive choice of visible tokens.
//!
//! A sampling network scores every spacetime token of a clip, visible tokens
//! are drawn without replacement from that distribution, and the sampler is
//! trained with a score-function loss that rewards picking tokens whose
//! reconstruction error would otherwise be high.

pub mod error;
pub mod io;
pub mod mask;
pub mod model;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
