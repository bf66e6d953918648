//! Manifests, WAV decoding and synthetic fixtures.

mod manifest;
pub mod synth;
mod wav;

pub use manifest::{load_manifest, manifest_to_string, write_manifest, ManifestEntry};
pub use synth::{synth_dataset, SynthDataset};
pub use wav::{read_audio, resample, write_wav, Waveform, SAMPLE_RATE};
