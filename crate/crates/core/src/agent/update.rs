use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{log_softmax, ActorCritic, Body};
use super::rollout::{compute_advantages, derive_seed, RolloutBatch};
use crate::error::{Error, Result};
use crate::motion::{seg_loss, LossBreakdown, RegNormalization};
use crate::nn::{clip_global_norm, AdamConfig, Optimizer, OptimizerKind, Parameterized, RmsPropConfig};
use crate::segnet::EMBED_DIM;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    A2c,
    Ppo,
}

impl std::str::FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a2c" => Ok(Algo::A2c),
            "ppo" => Ok(Algo::Ppo),
            other => Err(Error::config("algo", format!("unknown algorithm {other:?} (a2c, ppo)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpdateConfig {
    pub gamma: f64,
    pub n_steps: usize,
    pub num_envs: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub seg_coef: f64,
    pub grad_clip_norm: f64,
    /// Defaults to 7e-4 (RMSProp) for A2C and 2.5e-4 (Adam) for PPO.
    pub learning_rate: Option<f64>,
    pub clip_epsilon: f64,
    pub epochs: usize,
    pub minibatches: usize,
    /// Pairs per update (A2C) or per minibatch (PPO) that enter the joint
    /// segmentation loss.
    pub seg_batch: usize,
    pub lambda_reg: f64,
    pub reg_normalization: RegNormalization,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            n_steps: 5,
            num_envs: 16,
            entropy_coef: 0.01,
            value_coef: 0.5,
            seg_coef: 1.0,
            grad_clip_norm: 0.5,
            learning_rate: None,
            clip_epsilon: 0.2,
            epochs: 4,
            minibatches: 4,
            seg_batch: 16,
            lambda_reg: 1.0,
            reg_normalization: RegNormalization::default(),
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("gamma", "must lie in [0, 1)"));
        }
        for (name, v) in [
            ("entropy_coef", self.entropy_coef),
            ("value_coef", self.value_coef),
            ("seg_coef", self.seg_coef),
            ("grad_clip_norm", self.grad_clip_norm),
            ("lambda_reg", self.lambda_reg),
        ] {
            if v.is_nan() || v < 0.0 || v.is_infinite() {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        if self.clip_epsilon.is_nan() || self.clip_epsilon <= 0.0 {
            return Err(Error::config("clip_epsilon", "must be positive"));
        }
        for (name, v) in [
            ("n_steps", self.n_steps),
            ("num_envs", self.num_envs),
            ("epochs", self.epochs),
            ("minibatches", self.minibatches),
            ("seg_batch", self.seg_batch),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if self.minibatches > self.n_steps * self.num_envs {
            return Err(Error::config("minibatches", "more minibatches than samples per rollout"));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config("learning_rate", "must be positive and finite"));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self, algo: Algo) -> OptimizerKind {
        match algo {
            Algo::A2c => OptimizerKind::RmsProp(RmsPropConfig {
                lr: self.learning_rate.unwrap_or(7e-4),
                ..RmsPropConfig::default()
            }),
            Algo::Ppo => OptimizerKind::Adam(AdamConfig {
                lr: self.learning_rate.unwrap_or(2.5e-4),
                eps: 1e-5,
                ..AdamConfig::default()
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PolicyLoss {
    /// `−A·log π(a)`.
    Vanilla,
    /// Clipped surrogate and clipped value loss with the same `epsilon`.
    Clipped { epsilon: f64 },
}

/// Loss terms of one objective evaluation, each a batch mean.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveTerms {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    /// Unscaled segmentation loss, when it was evaluated.
    pub seg: Option<LossBreakdown>,
    /// Multiplier applied to the segmentation loss (unclipped fraction
    /// under PPO, 1 otherwise).
    pub seg_scale: f64,
    pub total: f64,
    /// Probability ratios against the behaviour policy.
    pub ratios: Vec<f64>,
    /// Per-sample indicator: policy or value term clipped.
    pub clipped: Vec<bool>,
}

/// Evaluates the actor-critic objective on rollout rows `idx` and
/// accumulates its gradient into `grad`.
///
/// The joint segmentation loss runs only for the dual architecture with
/// `joint_seg` set and a positive `seg_coef`; it sees at most `seg_batch`
/// rows, drawn with `seg_seed`.
#[allow(clippy::too_many_arguments)]
pub fn objective<T: Scalar>(
    agent: &ActorCritic<T>,
    rollout: &RolloutBatch<T>,
    idx: &[usize],
    returns: &[f64],
    advantages: &[f64],
    cfg: &UpdateConfig,
    mode: PolicyLoss,
    joint_seg: bool,
    seg_seed: u64,
    grad: &mut ActorCritic<T>,
) -> Result<ObjectiveTerms> {
    let m = idx.len();
    let na = agent.num_actions();
    let x = rollout.obs_rows(idx);
    let tr = agent.forward_trace(&x)?;
    let inv_m = 1.0 / m as f64;
    let (vc, ec) = (cfg.value_coef, cfg.entropy_coef);

    let mut d_logits = vec![T::zero(); m * na];
    let mut d_values = vec![T::zero(); m];
    let (mut pol, mut val, mut ent) = (0.0, 0.0, 0.0);
    let mut ratios = Vec::with_capacity(m);
    let mut clipped = Vec::with_capacity(m);
    for (i, &row) in idx.iter().enumerate() {
        let z: Vec<f64> = tr.logits[i * na..(i + 1) * na].iter().map(|v| v.as_f64()).collect();
        let logp = log_softmax(&z);
        let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let a = rollout.actions[row];
        let adv = advantages[row];
        let ret = returns[row];
        let v = tr.values[i].as_f64();
        let h: f64 = -p.iter().zip(&logp).map(|(pj, lj)| pj * lj).sum::<f64>();
        ent += h * inv_m;

        let ratio = (logp[a] - rollout.log_probs[row]).exp();
        ratios.push(ratio);
        // coefficient c in d(policy term)/dz_j = c·(δ_ja − p_j)
        let (pol_i, pg_coef, pol_clipped) = match mode {
            PolicyLoss::Vanilla => (-adv * logp[a], -adv, false),
            PolicyLoss::Clipped { epsilon } => {
                let s1 = ratio * adv;
                let s2 = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * adv;
                if s2 < s1 {
                    (-s2, 0.0, true)
                } else {
                    (-s1, -adv * ratio, false)
                }
            }
        };
        pol += pol_i * inv_m;

        let (val_i, dv, val_clipped) = match mode {
            PolicyLoss::Vanilla => ((v - ret).powi(2), 2.0 * (v - ret), false),
            PolicyLoss::Clipped { epsilon } => {
                let old = rollout.values[row];
                let unclipped = (v - ret).powi(2);
                let v_clip = if (v - old).abs() <= epsilon {
                    v
                } else {
                    old + (v - old).clamp(-epsilon, epsilon)
                };
                let clipped_loss = (v_clip - ret).powi(2);
                if clipped_loss > unclipped {
                    (clipped_loss, 0.0, true)
                } else {
                    (unclipped, 2.0 * (v - ret), false)
                }
            }
        };
        val += val_i * inv_m;
        d_values[i] = T::lit(vc * dv * inv_m);
        clipped.push(pol_clipped || val_clipped);

        for j in 0..na {
            let onehot = if j == a { 1.0 } else { 0.0 };
            let d = pg_coef * (onehot - p[j]) + ec * p[j] * (logp[j] + h);
            d_logits[i * na + j] = T::lit(d * inv_m);
        }
    }

    let seg_scale = match mode {
        PolicyLoss::Vanilla => 1.0,
        PolicyLoss::Clipped { .. } => clipped.iter().filter(|&&c| !c).count() as f64 / m as f64,
    };
    let mut seg = None;
    let mut d_motion: Option<Vec<T>> = None;
    if let (true, true, Body::Dual { segnet, .. }, Body::Dual { segnet: g_seg, .. }) =
        (joint_seg, cfg.seg_coef > 0.0 && seg_scale > 0.0, &agent.body, &mut grad.body)
    {
        let mut rows: Vec<usize> = (0..m).collect();
        if m > cfg.seg_batch {
            rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seg_seed));
            rows.truncate(cfg.seg_batch);
            rows.sort_unstable();
        }
        let mut emb = Vec::with_capacity(rows.len() * EMBED_DIM);
        for &r in &rows {
            emb.extend_from_slice(&tr.motion.embedding[r * EMBED_DIM..(r + 1) * EMBED_DIM]);
        }
        let xs = crate::nn::Activation {
            n: rows.len(),
            c: x.c,
            h: x.h,
            w: x.w,
            data: rows.iter().flat_map(|&r| x.sample(r).iter().copied()).collect(),
        };
        let (dec, out) = segnet.heads_trace(emb, rows.len())?;
        let (loss, d_out) = seg_loss(&xs, &out, cfg.lambda_reg, cfg.reg_normalization, cfg.seg_coef * seg_scale)?;
        let d_emb = segnet.heads_backward(&dec, &out, &d_out, g_seg)?;
        let mut full = vec![T::zero(); m * EMBED_DIM];
        for (k, &r) in rows.iter().enumerate() {
            full[r * EMBED_DIM..(r + 1) * EMBED_DIM].copy_from_slice(&d_emb[k * EMBED_DIM..(k + 1) * EMBED_DIM]);
        }
        d_motion = Some(full);
        seg = Some(loss);
    }

    agent.backward(&tr, &d_logits, &d_values, d_motion.as_deref(), grad)?;
    let seg_total = seg.map_or(0.0, |s| s.total);
    let total = pol + vc * val - ec * ent + cfg.seg_coef * seg_scale * seg_total;
    Ok(ObjectiveTerms {
        policy: pol,
        value: val,
        entropy: ent,
        seg,
        seg_scale,
        total,
        ratios,
        clipped,
    })
}

/// Scalars reported per update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss_policy: f64,
    pub loss_value: f64,
    pub loss_entropy: f64,
    /// Mean segmentation loss over the minibatches that evaluated it.
    pub loss_seg: Option<f64>,
    /// Mean multiplier applied to the segmentation loss.
    pub seg_scale: f64,
    pub clip_fraction: Option<f64>,
    pub grad_norm: f64,
    /// Largest `|ratio − 1|` in the first minibatch of the first epoch.
    pub first_ratio_deviation: Option<f64>,
    pub seg_evaluations: u64,
}

/// Parameters, optimizer state and a reusable gradient buffer.
#[derive(Clone, Debug)]
pub struct Learner<T> {
    pub agent: ActorCritic<T>,
    pub optimizer: Optimizer<T>,
    pub algo: Algo,
    pub config: UpdateConfig,
    pub joint_seg: bool,
    pub seed: u64,
    pub updates: u64,
    pub seg_evaluations: u64,
    grads: ActorCritic<T>,
}

impl<T: Scalar> Learner<T> {
    pub fn new(agent: ActorCritic<T>, algo: Algo, config: UpdateConfig, joint_seg: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let grads = agent.zeros_like();
        Ok(Self {
            optimizer: config.optimizer(algo).build(),
            agent,
            algo,
            config,
            joint_seg,
            seed,
            updates: 0,
            seg_evaluations: 0,
            grads,
        })
    }

    pub fn update(&mut self, rollout: &RolloutBatch<T>) -> Result<UpdateStats> {
        match self.algo {
            Algo::A2c => self.a2c_update(rollout),
            Algo::Ppo => self.ppo_update(rollout),
        }
    }

    /// One gradient step on the whole rollout.
    pub fn a2c_update(&mut self, rollout: &RolloutBatch<T>) -> Result<UpdateStats> {
        rollout.validate()?;
        let (returns, adv) = compute_advantages(rollout, self.config.gamma);
        let idx: Vec<usize> = (0..rollout.len()).collect();
        self.grads.zero_();
        let terms = objective(
            &self.agent,
            rollout,
            &idx,
            &returns,
            &adv,
            &self.config,
            PolicyLoss::Vanilla,
            self.joint_seg,
            derive_seed(self.seed, 1, self.updates),
            &mut self.grads,
        )?;
        check_finite(&terms, self.updates)?;
        let grad_norm = clip_global_norm(&mut self.grads, self.config.grad_clip_norm);
        self.optimizer.step(&mut self.agent, &self.grads);
        self.updates += 1;
        let evals = terms.seg.is_some() as u64;
        self.seg_evaluations += evals;
        Ok(UpdateStats {
            loss_policy: terms.policy,
            loss_value: terms.value,
            loss_entropy: terms.entropy,
            loss_seg: terms.seg.map(|s| s.total),
            seg_scale: terms.seg_scale,
            clip_fraction: None,
            grad_norm,
            first_ratio_deviation: None,
            seg_evaluations: evals,
        })
    }

    /// Several epochs of clipped minibatch updates over the rollout.
    pub fn ppo_update(&mut self, rollout: &RolloutBatch<T>) -> Result<UpdateStats> {
        rollout.validate()?;
        let cfg = self.config.clone();
        let (returns, adv) = compute_advantages(rollout, cfg.gamma);
        let n = rollout.len();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 2, self.updates));
        let mut stats = UpdateStats::default();
        let (mut count, mut seg_count, mut clipped, mut total) = (0usize, 0usize, 0usize, 0usize);
        let mut seg_sum = 0.0;
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for (mb, idx) in split_even(&order, cfg.minibatches).into_iter().enumerate() {
                self.grads.zero_();
                let seg_seed = derive_seed(self.seed, 3, self.updates * 1_000_003 + (epoch * cfg.minibatches + mb) as u64);
                let terms = objective(
                    &self.agent,
                    rollout,
                    idx,
                    &returns,
                    &adv,
                    &cfg,
                    PolicyLoss::Clipped {
                        epsilon: cfg.clip_epsilon,
                    },
                    self.joint_seg,
                    seg_seed,
                    &mut self.grads,
                )?;
                check_finite(&terms, self.updates)?;
                if epoch == 0 && mb == 0 {
                    stats.first_ratio_deviation = Some(terms.ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max));
                }
                stats.grad_norm += clip_global_norm(&mut self.grads, cfg.grad_clip_norm);
                self.optimizer.step(&mut self.agent, &self.grads);
                stats.loss_policy += terms.policy;
                stats.loss_value += terms.value;
                stats.loss_entropy += terms.entropy;
                stats.seg_scale += terms.seg_scale;
                if let Some(s) = terms.seg {
                    seg_sum += s.total;
                    seg_count += 1;
                }
                clipped += terms.clipped.iter().filter(|&&c| c).count();
                total += terms.clipped.len();
                count += 1;
            }
        }
        let c = count as f64;
        stats.loss_policy /= c;
        stats.loss_value /= c;
        stats.loss_entropy /= c;
        stats.seg_scale /= c;
        stats.grad_norm /= c;
        stats.loss_seg = (seg_count > 0).then(|| seg_sum / seg_count as f64);
        stats.clip_fraction = Some(clipped as f64 / total as f64);
        stats.seg_evaluations = seg_count as u64;
        self.seg_evaluations += seg_count as u64;
        self.updates += 1;
        Ok(stats)
    }
}

fn check_finite(t: &ObjectiveTerms, update: u64) -> Result<()> {
    if t.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "non-finite objective at update {update}: policy {} value {} entropy {} seg {:?}",
            t.policy, t.value, t.entropy, t.seg
        )))
    }
}

/// `parts` contiguous chunks whose sizes differ by at most one.
pub fn split_even(items: &[usize], parts: usize) -> Vec<&[usize]> {
    let (q, r) = (items.len() / parts, items.len() % parts);
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = q + usize::from(p < r);
        out.push(&items[start..start + len]);
        start += len;
    }
    out
}
