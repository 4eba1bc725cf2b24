//! Maximum-likelihood training: masked NLL, global-norm clipping, Adam,
//! checkpoints and validation-driven model selection.

mod adam;
mod checkpoint;
mod config;
mod loss;
mod run;

pub use adam::{adam_step, clip_gradients, AdamConfig, OptimizerState};
pub use checkpoint::{
    checkpoint_dtype, codecs_from_artifacts, Artifact, Checkpoint, BLOB_FILE, MANIFEST_FILE, SOURCE_MERGES,
    SOURCE_VOCAB, TARGET_MERGES, TARGET_VOCAB,
};
pub use config::{parse_key_values, TrainConfig};
pub use loss::{batch_nll, batch_nll_detailed};
pub use run::{
    corpus_nll, greedy_translate, log_line, run_training, DevSet, StepReport, TrainSummary, Trainer, Validation,
    BEST_DIR, LATEST_DIR, LOG_FILE,
};
