//! Stage orchestration: configs, deterministic data, transducer head, stage
//! runner, checkpoints with lineage, the evaluation grid and full recipes.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod recipe;
pub mod train;
pub mod transducer;

pub use checkpoint::{allowed_parents, validate_lineage, Checkpoint, CheckpointMeta, LineageEntry};
pub use config::{PipelineConfig, Phase, StageKind, Tap};
pub use data::{load_utterances, Utterance, Vocabulary};
pub use eval::{evaluate_grid, GridReport, GridRow};
pub use recipe::{run_ablation, run_recipe, AblationReport, RecipeConfig, RecipeOutputs};
pub use train::{run_stage, LoadedModel, StageInputs};
pub use transducer::Transducer;
