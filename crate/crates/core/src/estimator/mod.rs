//! Closed-form posterior updates, the semi-supervised likelihood, its
//! trainer and causal inference.

mod dof;
mod infer;
mod loss;
mod posterior;
mod train;

pub use dof::{dof_report, DofReport};
pub use infer::{infer, FilterOutput};
pub use loss::{
    batch_loss_and_grad, sequence_loss, sequence_loss_and_grad, sup_loss, total_loss, unsup_loss, SeqRef,
};
pub use posterior::{posterior_update, predictive_belief, predictive_loglik, PosteriorTerms};
pub use train::{train, train_with_validation, Adam, EpochRecord, TrainConfig, TrainLog, ValidationMetric};
