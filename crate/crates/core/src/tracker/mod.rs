//! The tracker: model, loss, training and one-pass inference.

pub mod checkpoint;
pub mod infer;
pub mod loss;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use infer::{crop_image, CropWindow};
pub use loss::{compute_loss, loss_on, LossBreakdown, LossTarget, LossWeights};
pub use model::{HeadOutput, HeadVars, ModalitySet, ModelConfig, PatchInputs, TrackerModel};
pub use train::{pretrain_backbone, prompted_from_backbone, train, TrainConfig, TrainReport, TrainState};
