//! Dual-mode Conformer encoder with masked full-sequence and chunked streaming forwards.

mod config;
mod model;
mod streaming;

pub use config::EncoderConfig;
pub use model::{BlockOutput, Encoder};
pub(crate) use model::array_to_tensor;
#[cfg(test)]
pub(crate) use model::tensor_to_array;
pub use streaming::StreamingState;
