//! Dual-path actor-critic agent, rollouts and update rules.

pub mod net;
pub mod rollout;
pub mod train;
pub mod update;

pub use net::{transfer_weights, ActorCritic, AgentConfig, Architecture, Body, PolicyOutput};
pub use rollout::{collect_rollout, compute_advantages, derive_seed, EpisodeRecord, RolloutBatch, VecEnv};
pub use train::{evaluate, write_eval, load_agent, train, AgentCheckpointConfig, EvalRow, EvalSummary, RunLayout, TrainConfig, TrainOutcome, UpdateRecord, AGENT_KIND};
pub use update::{objective, split_even, Algo, Learner, ObjectiveTerms, PolicyLoss, UpdateConfig, UpdateStats};
