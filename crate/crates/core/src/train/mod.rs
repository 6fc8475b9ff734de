//! Optimizer, checkpoint container and the staged training pipeline.

pub mod checkpoint;
pub mod optim;
pub mod pipeline;

pub use checkpoint::{wiseft_merge, Checkpoint};
pub use optim::{AdamHyper, AdamW, GroupHyper};
pub use pipeline::{finetune_carpe, pretrain_all, TrainLog};
