//! The baseline segmentation network, its optimizer and training loop.

mod adam;
mod checkpoint;
mod train;
mod unet;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use train::{
    predict_mask, predict_probs, train, validate, Checkpoint, EpochRecord, NoHooks, TrainConfig,
    TrainHooks, TrainOutcome,
};
pub use unet::{Architecture, ConvSpec, GradientBundle, ModelParams, NamedTensor, Tape};
