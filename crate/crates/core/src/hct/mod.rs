//! Embedding network training: cross entropy, the mixed-feature consistency
//! loss, rotation auxiliary loss, augmentations and checkpoints.

pub mod augment;
pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod train;

pub use augment::{strong_augment, weak_augment, AugmentKind, AugmentPolicy};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use loss::{ce_loss, hct_loss, make_pairs, mix_hidden, mix_labels, rot_loss, rot_loss_with, Batch, HctConfig, PairBatch};
pub use model::{Affine, MlpModel, ModelShape, Params};
pub use train::{classification_accuracy, train, write_loss_curve, AdamConfig, EpochLosses, TrainConfig, TrainOutcome};
