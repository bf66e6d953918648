//! Frozen-encoder probing: task heads, layer sweeps and the WER / DTW metrics.

pub mod contours;
pub mod metrics;
pub mod sweep;
pub mod train;

pub use contours::{reference_contours, Contours};
pub use metrics::{corpus_wer, dtw_corr, edit_distance, wer, wer_score, DtwConfig, WerScore};
pub use sweep::{layer_sweep, run_probes, ProbeReport, ProbeRow, TaskSummary};
pub use train::{train_probe, LayerSelection, Metric, ProbeDataset, ProbeExample, ProbeFeatures, ProbeKind, ProbeOutcome};
