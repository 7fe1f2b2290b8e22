//! The trainable model, its losses, the optimizer loop and checkpoints.

mod checkpoint;
mod config;
mod gradsuite;
mod loss;
mod model;
mod train;

pub use config::{
    ModelConfig, Variant, CONFIG_KEYS, FULL_SCALE_C2D, FULL_SCALE_C3D, FULL_SCALE_D_EXP, FULL_SCALE_GRID,
    FULL_SCALE_K_CRITICAL, FULL_SCALE_N_QUERY,
};
pub use model::{upsample_logits, Forward, Model, GEO_CHANNELS};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use loss::{total_loss, LossReport, LossTerms};
pub use train::{evaluate, evaluate_with, train, train_step, AdamW, EpochRecord, TrainOutcome};
pub use gradsuite::{gradcheck_config, run_gradient_suite, GradRow, GRAD_ROWS, GRAD_TOLERANCE};
