//! Progressive multi-task training: MT pre-training on external text, then
//! joint fine-tuning over ST, ASR and MT, with Adam under a warm-up
//! schedule, checkpointing and checkpoint averaging.

mod checkpoint;
mod optim;
mod recipe;
mod run;

pub use checkpoint::{
    average_checkpoints, checkpoint_file_name, list_checkpoints, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use optim::{adam_step, lr_at, sample_task, AdamState, ADAM_EPS, BETA1, BETA2};
pub use recipe::{DevMetric, Stage, TrainingRecipe, PRESETS};
pub use run::{
    dataset_loss, evaluate, run_recipe, score_task, LogRow, MetricsLog, RecipeOutcome, Split, StageReport, TrainData,
    TrainOptions, Trainer, METRICS_HEADER,
};
