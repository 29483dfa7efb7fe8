//! Hierarchical vector-quantized autoencoders for singing-voice conversion.

pub mod checkpoint;
pub mod conversion;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod hierarchy;
pub mod networks;
pub mod nn;
pub mod quantizer;
pub mod signal;

pub use error::{Error, Result};
