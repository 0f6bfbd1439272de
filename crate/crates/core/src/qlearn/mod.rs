//! Per-agent recurrent Q-learning with additive mixing, the weighted TD
//! operator, the counterfactual regularizer for the first-mover, episode
//! replay and target networks.

mod critic;
mod hyper;
mod learner;
mod ops;
mod qnet;
mod replay;

pub use critic::{critic_input, critic_input_dim, CentralCritic};
pub use hyper::Hyperparams;
pub use learner::{
    batch_loss, vdn_loss, ActState, Batch, Counters, Decision, Detached, InitRngs, Learner, LearnerConfig,
    LossParts, LossSettings, Nets, TrainStats, Variant,
};
pub use ops::{advantage_from_q, epsilon_at, mix, select_action, td_target, update_alpha, weighting};
pub use qnet::AgentQNet;
pub use replay::{Episode, ReplayBuffer, Transition};
