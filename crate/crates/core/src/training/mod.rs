//! Target assignment, loss, the optimizer loop and checkpoints.

mod checkpoint;
mod data;
mod loss;
mod targets;
mod train;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, FORMAT_VERSION, MAGIC};
pub use data::{Dataset, GroundTruthBox, Sample};
pub use loss::{bce_with_logits, detection_loss, iou_with_grad, loss_from_levels, LossComponents, LossOutput, LossWeights};
pub use targets::{assign_targets, CellTarget, TargetSpec, Targets};
pub use train::{
    evaluate, predict_dataset, train, EpochRecord, EvalConfig, LrSchedule, TrainConfig, TrainObserver, TrainOutcome,
};
