//! Losses, optimiser, metrics, synthetic data and the training loop.

pub mod data;
pub mod loss;
pub mod metrics;
pub mod optim;
mod trainer;

pub use data::{gen_synthetic, BatchLabels, Dataset, LabelKind, Splits, SyntheticSpec, SyntheticTask};
pub use loss::{bce_multilabel, cross_entropy};
pub use metrics::{auroc, mean_std};
pub use optim::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use trainer::{
    evaluate, loss_var, train_loop, train_run, EpochLog, EvalReport, RunOutcome, Summary, TrainConfig, TrainOutcome,
};
