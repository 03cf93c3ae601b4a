//! AdamW with a cosine schedule, checkpoints and the training loop.

pub mod checkpoint;
pub mod optim;
pub mod trainer;

pub use checkpoint::{
    config_mismatch, decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint,
    save_checkpoint, Checkpoint,
};
pub use optim::{
    adamw_step, clip_grad_norm, cosine_lr, grad_norm, TrainState, ADAM_EPS, BETA1, BETA2,
};
pub use trainer::{
    evaluate, parse_loss_weights, Event, StepRecord, TrainConfig, Trainer, ValRecord,
    BEST_CHECKPOINT, LAST_CHECKPOINT, TELEMETRY_FILE, TELEMETRY_HEADER, VALIDATION_FILE,
    VALIDATION_HEADER,
};
