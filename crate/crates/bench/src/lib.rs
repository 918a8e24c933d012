//! Deterministic inputs shared by the benchmarks.

use morel_core::agent::{collect_rollout, ActorCritic, AgentConfig, Architecture, RolloutBatch, VecEnv};
use morel_core::env::{pairs_to_activation, EnvConfig, FramePair, SpriteWorld, NUM_ACTIONS};
use morel_core::nn::Activation;
use morel_core::SegNetConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` consecutive observation pairs from a random-policy episode.
pub fn frame_pairs(n: usize, seed: u64) -> Vec<FramePair> {
    let mut world = SpriteWorld::new(EnvConfig::default()).expect("default config is valid");
    world.reset(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| world.step(rng.random_range(0..NUM_ACTIONS)).expect("episode long enough").obs)
        .collect()
}

pub fn batch(n: usize, seed: u64) -> Activation<f32> {
    pairs_to_activation(&frame_pairs(n, seed))
}

pub fn agent(architecture: Architecture) -> ActorCritic<f32> {
    ActorCritic::new(
        AgentConfig {
            architecture,
            segnet: SegNetConfig::default(),
            num_actions: NUM_ACTIONS,
        },
        0,
    )
    .expect("default agent config is valid")
}

/// One rollout of `n_steps × num_envs` transitions under `agent`.
pub fn rollout(agent: &ActorCritic<f32>, n_steps: usize, num_envs: usize) -> RolloutBatch<f32> {
    let mut envs = VecEnv::new(&EnvConfig::default(), num_envs, 0).expect("default config is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    collect_rollout(agent, &mut envs, n_steps, &mut rng).expect("rollout").0
}
