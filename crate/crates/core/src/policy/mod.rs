//! Offline policy learning: behaviour cloning of the clinician policy on
//! raw observations and discrete batch-constrained Q-learning on latents.

mod bc;
mod dbcq;

pub use bc::{
    bc_accuracy, bc_loss, bc_probs, bc_probs_batch, floor_probs, train_behavior_cloning, BcConfig, BcParams, TrainedBc,
    BC_HIDDEN, PROB_FLOOR,
};
pub use dbcq::{
    dbcq_select_action, dbcq_targets, dbcq_train, dbcq_train_from, dbcq_train_step, eligible_actions, DbcqConfig,
    DbcqRun, DbcqTrainer, QParams, StepStats, Q_HIDDEN,
};

#[cfg(test)]
mod tests;
