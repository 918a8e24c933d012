use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{ActorCritic, AgentConfig};
use super::rollout::{collect_rollout, derive_seed, sample_action, EpisodeRecord, VecEnv};
use super::update::{Algo, Learner, UpdateConfig};
use crate::checkpoint::Checkpoint;
use crate::env::{pairs_to_activation, EnvConfig, FramePair, SpriteWorld};
use crate::error::{Error, Result};

pub const AGENT_KIND: &str = "agent";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub algo: Algo,
    pub update: UpdateConfig,
    pub total_env_steps: u64,
    pub seed: u64,
    /// Updates between evaluations; 0 evaluates only at the end.
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Shared by every run so curves are comparable.
    pub eval_seed: u64,
    /// Updates between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Finished training episodes averaged into `mean_return`.
    pub return_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            algo: Algo::A2c,
            update: UpdateConfig::default(),
            total_env_steps: 200_000,
            seed: 0,
            eval_every: 0,
            eval_episodes: 5,
            eval_seed: 1234,
            checkpoint_every: 0,
            return_window: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.update.validate()?;
        if self.eval_episodes == 0 {
            return Err(Error::config("eval_episodes", "must be at least 1"));
        }
        if self.return_window == 0 {
            return Err(Error::config("return_window", "must be at least 1"));
        }
        Ok(())
    }

    pub fn steps_per_update(&self) -> u64 {
        (self.update.n_steps * self.update.num_envs) as u64
    }

    /// Whole updates that fit in the step budget.
    pub fn num_updates(&self) -> u64 {
        self.total_env_steps / self.steps_per_update()
    }
}

/// One row of a run's `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: u64,
    pub env_steps: u64,
    pub mean_return: Option<f64>,
    pub loss_policy: f64,
    pub loss_value: f64,
    pub loss_entropy: f64,
    pub loss_seg: Option<f64>,
    pub clip_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub episode: usize,
    pub seed: u64,
    pub episode_return: f64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub update: u64,
    pub env_steps: u64,
    pub mean_return: f64,
    pub std_return: f64,
}

impl EvalSummary {
    pub fn from_rows(update: u64, env_steps: u64, rows: &[EvalRow]) -> Self {
        let n = rows.len() as f64;
        let mean = rows.iter().map(|r| r.episode_return).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r.episode_return - mean).powi(2)).sum::<f64>() / n;
        Self {
            update,
            env_steps,
            mean_return: mean,
            std_return: var.sqrt(),
        }
    }
}

/// What an agent checkpoint stores as its config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpointConfig {
    pub agent: AgentConfig,
    pub train: TrainConfig,
    pub joint_seg: bool,
}

pub struct TrainOutcome {
    pub learner: Learner<f32>,
    pub history: Vec<UpdateRecord>,
    pub evals: Vec<EvalSummary>,
    pub checkpoint: Checkpoint,
}

/// Paths under a training run directory.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("final.ckpt")
    }

    pub fn update_checkpoint(&self, update: u64) -> PathBuf {
        self.checkpoints().join(format!("update_{update:08}.ckpt"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn eval_csv(&self, update: u64) -> PathBuf {
        self.eval_dir().join(format!("update_{update:08}.csv"))
    }
}

/// Plays `episodes` full episodes, sampling from the policy with a fixed
/// seed. Episode `i` starts the environment from `derive_seed(seed, 0, i)`.
pub fn evaluate(agent: &ActorCritic<f32>, env: &EnvConfig, episodes: usize, seed: u64) -> Result<Vec<EvalRow>> {
    if episodes == 0 {
        return Err(Error::Argument("evaluation needs at least one episode".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, 0));
    let mut worlds = Vec::with_capacity(episodes);
    let mut rows = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let s = derive_seed(seed, 0, i as u64);
        let mut w = SpriteWorld::new(env.clone())?;
        w.reset(s);
        worlds.push(w);
        rows.push(EvalRow {
            episode: i,
            seed: s,
            episode_return: 0.0,
            length: 0,
        });
    }
    let mut active: Vec<usize> = (0..episodes).collect();
    while !active.is_empty() {
        let obs: Vec<FramePair> = active.iter().map(|&i| worlds[i].observation()).collect::<Result<_>>()?;
        let out = agent.act(&pairs_to_activation::<f32>(&obs))?;
        let mut still = Vec::with_capacity(active.len());
        for (j, &i) in active.iter().enumerate() {
            let t = worlds[i].step(sample_action(out.row(j), &mut rng))?;
            rows[i].episode_return += t.reward as f64;
            rows[i].length += 1;
            if !t.done {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(rows)
}

pub fn write_eval(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Synchronous rollout/update loop. With `out_dir`, writes the run
/// directory; `config.toml` is only written if the caller has not already
/// placed one there.
pub fn train(agent: ActorCritic<f32>, config: &TrainConfig, joint_seg: bool, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let agent_config = agent.config;
    let ck_config = AgentCheckpointConfig {
        agent: agent_config,
        train: config.clone(),
        joint_seg,
    };
    let layout = out_dir.map(RunLayout::new);
    let mut writer = match &layout {
        Some(l) => {
            for d in [l.checkpoints(), l.eval_dir()] {
                fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
            }
            if !l.config().exists() {
                let text = toml::to_string(config).map_err(|e| Error::Serde(e.to_string()))?;
                fs::write(l.config(), text).map_err(|e| Error::io("writing config.toml", e))?;
            }
            Some(csv::Writer::from_path(l.metrics())?)
        }
        None => None,
    };

    let mut learner = Learner::new(agent, config.algo, config.update.clone(), joint_seg, config.seed)?;
    let mut envs = VecEnv::new(&config.env, config.update.num_envs, derive_seed(config.seed, 5, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 4, 0));
    let mut recent: VecDeque<f64> = VecDeque::with_capacity(config.return_window);
    let mut history = Vec::new();
    let mut evals = Vec::new();
    let updates = config.num_updates();
    let start = Instant::now();

    let run_eval = |learner: &Learner<f32>, update: u64, evals: &mut Vec<EvalSummary>| -> Result<()> {
        let rows = evaluate(&learner.agent, &config.env, config.eval_episodes, config.eval_seed)?;
        if let Some(l) = &layout {
            write_eval(&l.eval_csv(update), &rows)?;
        }
        evals.push(EvalSummary::from_rows(update, update * config.steps_per_update(), &rows));
        Ok(())
    };

    for u in 1..=updates {
        let (rollout, finished) = collect_rollout(&learner.agent, &mut envs, config.update.n_steps, &mut rng)?;
        for EpisodeRecord { episode_return, .. } in finished {
            if recent.len() == config.return_window {
                recent.pop_front();
            }
            recent.push_back(episode_return);
        }
        let stats = learner.update(&rollout)?;
        let row = UpdateRecord {
            update: u,
            env_steps: u * config.steps_per_update(),
            mean_return: (!recent.is_empty()).then(|| recent.iter().sum::<f64>() / recent.len() as f64),
            loss_policy: stats.loss_policy,
            loss_value: stats.loss_value,
            loss_entropy: stats.loss_entropy,
            loss_seg: stats.loss_seg,
            clip_fraction: stats.clip_fraction,
        };
        if let Some(w) = writer.as_mut() {
            w.serialize(&row)?;
        }
        if u % 100 == 0 {
            info!(
                "update {u}/{updates}: env_steps {} mean_return {:?} ({:.1}s)",
                row.env_steps,
                row.mean_return,
                start.elapsed().as_secs_f64()
            );
        }
        history.push(row);
        if config.eval_every > 0 && u % config.eval_every == 0 && u != updates {
            run_eval(&learner, u, &mut evals)?;
        }
        if let (Some(l), true) = (&layout, config.checkpoint_every > 0 && u % config.checkpoint_every == 0) {
            if let Some(w) = writer.as_mut() {
                w.flush().map_err(|e| Error::io("flushing metrics", e))?;
            }
            Checkpoint::from_model(AGENT_KIND, &learner.agent, u, &ck_config)?
                .with_optimizer(&learner.optimizer)
                .save(&l.update_checkpoint(u))?;
        }
    }
    if let Some(mut w) = writer {
        w.flush().map_err(|e| Error::io("flushing metrics", e))?;
    }
    run_eval(&learner, updates, &mut evals)?;
    let checkpoint = Checkpoint::from_model(AGENT_KIND, &learner.agent, updates, &ck_config)?.with_optimizer(&learner.optimizer);
    if let Some(l) = &layout {
        checkpoint.save(&l.final_checkpoint())?;
    }
    Ok(TrainOutcome {
        learner,
        history,
        evals,
        checkpoint,
    })
}

/// Rebuilds an agent from a checkpoint written by [`train`].
pub fn load_agent(ck: &Checkpoint) -> Result<(ActorCritic<f32>, AgentCheckpointConfig)> {
    if ck.kind != AGENT_KIND {
        return Err(Error::State(format!("checkpoint holds a {:?}, not an agent", ck.kind)));
    }
    let cfg: AgentCheckpointConfig = ck.config_as()?;
    let mut agent = ActorCritic::zeros(cfg.agent)?;
    ck.load_into("", &mut agent)?;
    Ok((agent, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::net::Architecture;
    use crate::segnet::SegNetConfig;

    fn small() -> (ActorCritic<f32>, TrainConfig) {
        let agent = ActorCritic::new(
            AgentConfig {
                architecture: Architecture::Standard,
                segnet: SegNetConfig::default(),
                num_actions: 5,
            },
            0,
        )
        .unwrap();
        let cfg = TrainConfig {
            env: EnvConfig {
                episode_len: 6,
                ..EnvConfig::default()
            },
            update: UpdateConfig {
                n_steps: 2,
                num_envs: 2,
                ..UpdateConfig::default()
            },
            total_env_steps: 4,
            eval_episodes: 2,
            ..TrainConfig::default()
        };
        (agent, cfg)
    }

    #[test]
    fn one_update_when_budget_is_one_rollout() {
        let (agent, cfg) = small();
        let out = train(agent, &cfg, false, None).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.history[0].env_steps, 4);
        assert_eq!(out.learner.updates, 1);
    }

    #[test]
    fn run_directory_layout() {
        let (agent, mut cfg) = small();
        cfg.total_env_steps = 12;
        cfg.checkpoint_every = 2;
        let dir = tempfile::tempdir().unwrap();
        let out = train(agent, &cfg, false, Some(dir.path())).unwrap();
        let l = RunLayout::new(dir.path());
        assert!(l.config().exists() && l.final_checkpoint().exists() && l.update_checkpoint(2).exists());
        assert!(l.eval_csv(3).exists());
        let text = fs::read_to_string(l.metrics()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "update,env_steps,mean_return,loss_policy,loss_value,loss_entropy,loss_seg,clip_fraction"
        );
        assert_eq!(text.lines().count(), 4);
        let (back, c) = load_agent(&Checkpoint::load(&l.final_checkpoint()).unwrap()).unwrap();
        assert_eq!(back, out.learner.agent);
        assert!(!c.joint_seg);
    }

    #[test]
    fn evaluation_is_seeded() {
        let (agent, cfg) = small();
        let a = evaluate(&agent, &cfg.env, 3, 9).unwrap();
        let b = evaluate(&agent, &cfg.env, 3, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.length == 6));
        assert!(evaluate(&agent, &cfg.env, 0, 9).is_err());
    }
}
