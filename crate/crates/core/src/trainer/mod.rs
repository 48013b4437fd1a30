//! Feedback-conditioned fine-tuning: sequence layout, loss terms, Adam.

mod batch;
mod loss;
mod optim;
mod train;

pub use batch::{build_row, build_training_sequence, PaddedRow, TrainBatch, TrainRow};
pub use loss::{
    entropy_term, evaluate_loss, kl_ref_term, loss_and_grads, nll_term, position_kl, position_neg_entropy,
    position_nll, KlDirection, LossBreakdown, LossConfig,
};
pub use optim::{adam_step, AdamConfig, OptimizerState, ScheduleConfig};
pub use train::{train_iteration, StepMetrics, TrainOptions, TrainReport};
