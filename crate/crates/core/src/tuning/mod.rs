//! Finetuning on mask-category pairs: prompt tuning, full finetuning and
//! their combinations.

pub mod loss;
pub mod optim;
pub mod pretrain;
pub mod train;

pub use loss::{grad_prompts, loss_and_grads, pair_loss, GradTargets, LossAndGrads, PairBatch, TextCache, TrainingPair};
pub use optim::{cosine_lr, AdamW};
pub use pretrain::{natural_images, pretrain, PretrainConfig};
pub use train::{evaluate_top1, train, EpochMetrics, GroupHyper, PromptInit, TrainConfig, TrainMode, TrainOutcome};
