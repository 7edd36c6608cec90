//! The sample-emitting MLP, the variance-network baseline head, Adam and the
//! training loop.

mod adam;
mod checkpoint;
mod loss;
mod mlp;
mod train;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{combined_loss, CombinedLoss};
pub use mlp::{Activation, Head, Layer, MlpConfig, SampleNetModel, VAR_FLOOR};
pub use train::{
    train, HistoryEntry, Objective, TrainResult, TrainSchedule, TrainStatus, ValidationMetric,
};
