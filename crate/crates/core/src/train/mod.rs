//! Episodic training, checkpoints and evaluation.

mod checkpoint;
mod config;
mod eval;
mod optim;
mod trainer;

pub use checkpoint::{BranchState, Checkpoint, FORMAT_VERSION};
pub use config::{RunConfig, VariantChoice};
pub use eval::{embed_for_eval, evaluate, EvalOutcome, EvalReport};
pub use optim::Adam;
pub use trainer::{
    embed_graphs, embed_table, episode_gradients, episode_objective, prepare_dataset, task_accuracy,
    task_predictions, train, train_with, EmbeddingTable, TrainEvent,
};
