use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::net::{ActorCritic, PolicyOutput};
use crate::env::{pairs_to_activation, EnvConfig, FramePair, SpriteWorld};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::tensor::Scalar;

/// Fixed-horizon transitions from parallel environments, time-major: entry
/// `t * num_envs + e` is step `t` of environment `e`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch<T> {
    pub n_steps: usize,
    pub num_envs: usize,
    /// Observation each action was taken from, `(n_steps·num_envs)×2×H×W`.
    pub obs: Activation<T>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Value of the observation after the last step, per environment.
    pub bootstrap_values: Vec<f64>,
}

impl<T: Scalar> RolloutBatch<T> {
    pub fn len(&self) -> usize {
        self.n_steps * self.num_envs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let ok = self.obs.n == n
            && self.actions.len() == n
            && self.rewards.len() == n
            && self.dones.len() == n
            && self.values.len() == n
            && self.log_probs.len() == n
            && self.bootstrap_values.len() == self.num_envs;
        if !ok {
            return Err(Error::Shape("rollout fields disagree on length".into()));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numeric("rollout holds a non-finite reward".into()));
        }
        Ok(())
    }

    /// Rows `idx` of the observation tensor.
    pub fn obs_rows(&self, idx: &[usize]) -> Activation<T> {
        let f = self.obs.features();
        let mut data = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            data.extend_from_slice(self.obs.sample(i));
        }
        Activation {
            n: idx.len(),
            c: self.obs.c,
            h: self.obs.h,
            w: self.obs.w,
            data,
        }
    }
}

/// n-step discounted returns bootstrapped from the value at the horizon, and
/// advantages `R_t − V_t`. A `done` at step `t` cuts the bootstrap.
pub fn compute_advantages<T: Scalar>(rollout: &RolloutBatch<T>, gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let (n, e) = (rollout.n_steps, rollout.num_envs);
    let mut returns = vec![0.0; n * e];
    for env in 0..e {
        let mut r = rollout.bootstrap_values[env];
        for t in (0..n).rev() {
            let i = t * e + env;
            let cont = if rollout.dones[i] { 0.0 } else { 1.0 };
            r = rollout.rewards[i] + gamma * r * cont;
            returns[i] = r;
        }
    }
    let adv = returns.iter().zip(&rollout.values).map(|(r, v)| r - v).collect();
    (returns, adv)
}

/// Deterministic seed for stream `stream`, item `index` under `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A set of independent environments stepped in lockstep. Finished episodes
/// restart immediately with the next seed of that environment's stream.
pub struct VecEnv {
    envs: Vec<SpriteWorld>,
    base_seed: u64,
    episodes: Vec<u64>,
    obs: Vec<FramePair>,
    running_return: Vec<f64>,
    running_len: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub env: usize,
    pub episode_return: f64,
    pub length: u64,
}

impl VecEnv {
    pub fn new(config: &EnvConfig, num_envs: usize, base_seed: u64) -> Result<Self> {
        if num_envs == 0 {
            return Err(Error::config("num_envs", "must be positive"));
        }
        let mut envs = Vec::with_capacity(num_envs);
        let mut obs = Vec::with_capacity(num_envs);
        for e in 0..num_envs {
            let mut env = SpriteWorld::new(config.clone())?;
            env.reset(derive_seed(base_seed, e as u64, 0));
            obs.push(env.observation()?);
            envs.push(env);
        }
        Ok(Self {
            envs,
            base_seed,
            episodes: vec![0; num_envs],
            obs,
            running_return: vec![0.0; num_envs],
            running_len: vec![0; num_envs],
        })
    }

    pub fn num_envs(&self) -> usize {
        self.envs.len()
    }

    pub fn observations(&self) -> &[FramePair] {
        &self.obs
    }

    /// Steps every environment; returns rewards, dones and finished episodes.
    pub fn step(&mut self, actions: &[usize]) -> Result<(Vec<f64>, Vec<bool>, Vec<EpisodeRecord>)> {
        let mut rewards = Vec::with_capacity(actions.len());
        let mut dones = Vec::with_capacity(actions.len());
        let mut finished = Vec::new();
        for (e, (env, &a)) in self.envs.iter_mut().zip(actions).enumerate() {
            let t = env.step(a)?;
            self.running_return[e] += t.reward as f64;
            self.running_len[e] += 1;
            rewards.push(t.reward as f64);
            dones.push(t.done);
            if t.done {
                finished.push(EpisodeRecord {
                    env: e,
                    episode_return: self.running_return[e],
                    length: self.running_len[e],
                });
                self.running_return[e] = 0.0;
                self.running_len[e] = 0;
                self.episodes[e] += 1;
                env.reset(derive_seed(self.base_seed, e as u64, self.episodes[e]));
                self.obs[e] = env.observation()?;
            } else {
                self.obs[e] = t.obs;
            }
        }
        Ok((rewards, dones, finished))
    }
}

pub fn sample_action<T: Scalar>(probs: &[T], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p.as_f64();
        if u < acc {
            return a;
        }
    }
    probs.len() - 1
}

/// Runs the current policy for `n_steps` in every environment.
pub fn collect_rollout(
    agent: &ActorCritic<f32>,
    envs: &mut VecEnv,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(RolloutBatch<f32>, Vec<EpisodeRecord>)> {
    let ne = envs.num_envs();
    let mut obs_data = Vec::new();
    let mut actions = Vec::with_capacity(n_steps * ne);
    let mut rewards = Vec::with_capacity(n_steps * ne);
    let mut dones = Vec::with_capacity(n_steps * ne);
    let mut values = Vec::with_capacity(n_steps * ne);
    let mut log_probs = Vec::with_capacity(n_steps * ne);
    let mut finished = Vec::new();
    let mut shape = (0, 0, 0);
    for _ in 0..n_steps {
        let x = pairs_to_activation::<f32>(envs.observations());
        shape = (x.c, x.h, x.w);
        let out: PolicyOutput<f32> = agent.act(&x)?;
        let acts: Vec<usize> = (0..ne).map(|e| sample_action(out.row(e), rng)).collect();
        for (e, &a) in acts.iter().enumerate() {
            log_probs.push((out.row(e)[a] as f64).ln());
            values.push(out.values[e] as f64);
        }
        obs_data.extend_from_slice(&x.data);
        let (r, d, f) = envs.step(&acts)?;
        actions.extend(acts);
        rewards.extend(r);
        dones.extend(d);
        finished.extend(f);
    }
    let last = agent.act(&pairs_to_activation::<f32>(envs.observations()))?;
    let rollout = RolloutBatch {
        n_steps,
        num_envs: ne,
        obs: Activation::from_vec(n_steps * ne, shape.0, shape.1, shape.2, obs_data)?,
        actions,
        rewards,
        dones,
        values,
        log_probs,
        bootstrap_values: last.values.iter().map(|&v| v as f64).collect(),
    };
    Ok((rollout, finished))
}
