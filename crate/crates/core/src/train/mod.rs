//! Losses, optimizer, parameter ledger, training loop and checkpoints.

pub mod checkpoint;
pub mod ledger;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError,
};
pub use ledger::{param_ledger, LedgerReport, ParamGroup};
pub use loss::{cross_entropy, dice_loss, total_loss, LossConfig};
pub use optim::{lr_at, AdamW, AdamWConfig};
pub use trainer::{evaluate, predict_all, sample_points, train, train_with, StepRecord};
