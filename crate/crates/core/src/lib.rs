//! Dual-mode Conformer speech encoder toolkit.
//!
//! One parameter set serves full-context, partial look-ahead and pure streaming
//! inference. Training runs as a chain of stages (self-supervised pretraining,
//! full-context transducer fine-tuning, pseudo-label distillation under variable
//! attention masks, dual-mode transducer fine-tuning), and a probing harness
//! measures what each encoder layer encodes.

pub mod audio_io;
pub mod encoder;
pub mod error;
pub mod frontend;
pub mod maskgen;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod probe;
pub mod quantizer;
pub mod tensor_file;

pub use error::{Error, Result};
pub use maskgen::{AttentionMask, Context, ContextSpec, SamplingSpace};
