//! Unsupervised pretraining of the segmentation network on recorded frame
//! pairs, with the regularization curriculum and periodic checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::env::{pairs_to_activation, Dataset, FramePair, PairSampler, FRAME_PIXELS};
use crate::error::{Error, Result};
use crate::motion::{compose_flow, dssim, lambda_schedule, seg_loss, warp, CurriculumSchedule, LossBreakdown, RegNormalization};
use crate::nn::{Activation, AdamConfig, Optimizer, OptimizerKind, Parameterized};
use crate::segnet::{SegNet, SegNetConfig, DEFAULT_K, FRAME_SIZE};

pub const SEGNET_KIND: &str = "segnet";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub seed: u64,
    /// Periodic checkpoint interval in steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub k: usize,
    pub reg_normalization: RegNormalization,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            total_steps: 5_000,
            warmup_steps: 2_000,
            seed: 0,
            checkpoint_every: 1_000,
            k: DEFAULT_K,
            reg_normalization: RegNormalization::default(),
        }
    }
}

impl PretrainConfig {
    /// Full-length schedule: 250k steps with a 100k-step warm-up.
    pub fn full_scale() -> Self {
        Self {
            total_steps: 250_000,
            warmup_steps: 100_000,
            checkpoint_every: 25_000,
            ..Self::default()
        }
    }

    /// Sets `total_steps` and rescales the warm-up to 40% of it.
    pub fn with_steps(mut self, total: u64) -> Self {
        self.total_steps = total;
        self.warmup_steps = CurriculumSchedule::scaled(total).warmup_steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.warmup_steps == 0 {
            return Err(Error::config("warmup_steps", "must be at least 1"));
        }
        if self.total_steps > 0 && self.warmup_steps > self.total_steps {
            return Err(Error::config(
                "warmup_steps",
                format!("{} exceeds total_steps {}", self.warmup_steps, self.total_steps),
            ));
        }
        if self.k == 0 {
            return Err(Error::config("k", "need at least one object mask"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CurriculumSchedule {
        CurriculumSchedule {
            warmup_steps: self.warmup_steps.max(1),
        }
    }

    pub fn segnet_config(&self) -> SegNetConfig {
        SegNetConfig {
            k: self.k,
            frame_size: FRAME_SIZE,
        }
    }

    fn optimizer(&self) -> OptimizerKind {
        OptimizerKind::Adam(AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        })
    }
}

/// One row of the pretraining metrics CSV. `step` is the 0-based index of
/// the update; `lambda_reg` is the weight that update used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lambda_reg: f64,
    pub loss_total: f64,
    pub loss_reconstruct: f64,
    pub loss_reg: f64,
    pub wall_time_s: f64,
}

/// What a checkpoint stores as its config for a segmentation network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegCheckpointConfig {
    pub network: SegNetConfig,
    pub pretrain: PretrainConfig,
    pub dataset_frames: u64,
}

pub struct PretrainOutcome<M> {
    pub model: M,
    pub checkpoint: Checkpoint,
    pub history: Vec<StepMetrics>,
}

/// Paths written under a pretraining output directory.
pub struct PretrainLayout {
    pub root: PathBuf,
}

impl PretrainLayout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
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

    pub fn step_checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step_{step:08}.ckpt"))
    }
}

/// Trains a fresh segmentation network. When `out_dir` is given, writes
/// `metrics.csv` and `checkpoints/` there.
pub fn pretrain(dataset: &mut Dataset, config: &PretrainConfig, out_dir: Option<&Path>) -> Result<PretrainOutcome<SegNet<f32>>> {
    config.validate()?;
    let net = SegNet::<f32>::new(config.segnet_config(), config.seed)?;
    let ck_config = SegCheckpointConfig {
        network: net.config,
        pretrain: config.clone(),
        dataset_frames: dataset.header().frame_count,
    };
    let norm = config.reg_normalization;
    run_loop(dataset, config, out_dir, SEGNET_KIND, &ck_config, net, |net, grads, x, lambda| {
        let trace = net.forward_trace(x)?;
        let (loss, d_out) = seg_loss(x, &trace.output, lambda, norm, 1.0)?;
        if loss.total.is_finite() {
            net.backward(&trace, &d_out, None, grads)?;
        }
        Ok(loss)
    })
}

/// Shared optimization loop for both pretraining objectives. `step_fn`
/// evaluates the loss for a batch and accumulates gradients into `grads`.
pub(crate) fn run_loop<M, C, F>(
    dataset: &mut Dataset,
    config: &PretrainConfig,
    out_dir: Option<&Path>,
    kind: &str,
    ck_config: &C,
    mut model: M,
    mut step_fn: F,
) -> Result<PretrainOutcome<M>>
where
    M: Parameterized<f32> + Clone,
    C: Serialize,
    F: FnMut(&M, &mut M, &Activation<f32>, f64) -> Result<LossBreakdown>,
{
    if config.total_steps > 0 && dataset.num_pairs() < config.batch_size {
        return Err(Error::Argument(format!(
            "dataset has {} pairs, fewer than batch size {}",
            dataset.num_pairs(),
            config.batch_size
        )));
    }
    let layout = out_dir.map(PretrainLayout::new);
    let mut writer = match &layout {
        Some(l) => {
            fs::create_dir_all(l.checkpoints()).map_err(|e| Error::io(format!("creating {}", l.root.display()), e))?;
            Some(csv::Writer::from_path(l.metrics())?)
        }
        None => None,
    };
    let mut sampler = PairSampler::new(dataset.num_pairs().max(1), config.seed)?;
    let mut opt: Optimizer<f32> = config.optimizer().build();
    let schedule = config.schedule();
    let mut grads = model.zeros_like();
    let mut history = Vec::with_capacity(config.total_steps as usize);
    let start = Instant::now();

    for step in 0..config.total_steps {
        let idx = sampler.next_batch(config.batch_size);
        let pairs = dataset.pairs(&idx)?;
        let x = pairs_to_activation::<f32>(&pairs);
        let lambda = lambda_schedule(step, &schedule);
        grads.zero_();
        let loss = step_fn(&model, &mut grads, &x, lambda)?;
        if !loss.total.is_finite() {
            if let Some(l) = &layout {
                dump_batch(&l.root, step, &idx, &pairs, &loss)?;
            }
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step} (reconstruction {}, regularization {})",
                loss.reconstruction, loss.regularization
            )));
        }
        opt.step(&mut model, &grads);
        let row = StepMetrics {
            step,
            lambda_reg: lambda,
            loss_total: loss.total,
            loss_reconstruct: loss.reconstruction,
            loss_reg: loss.regularization,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = writer.as_mut() {
            w.serialize(&row)?;
        }
        if step % 100 == 0 {
            info!(
                "step {step}: total {:.5} recon {:.5} reg {:.5} lambda {:.3}",
                row.loss_total, row.loss_reconstruct, row.loss_reg, lambda
            );
        }
        history.push(row);
        let done = step + 1;
        if let (Some(l), true) = (&layout, config.checkpoint_every > 0 && done % config.checkpoint_every == 0) {
            if let Some(w) = writer.as_mut() {
                w.flush().map_err(|e| Error::io("flushing metrics", e))?;
            }
            Checkpoint::from_model(kind, &model, done, ck_config)?
                .with_optimizer(&opt)
                .save(&l.step_checkpoint(done))?;
        }
    }
    if let Some(mut w) = writer {
        w.flush().map_err(|e| Error::io("flushing metrics", e))?;
    }
    let checkpoint = Checkpoint::from_model(kind, &model, config.total_steps, ck_config)?.with_optimizer(&opt);
    if let Some(l) = &layout {
        checkpoint.save(&l.final_checkpoint())?;
    }
    Ok(PretrainOutcome {
        model,
        checkpoint,
        history,
    })
}

/// Writes the offending batch as an `SPRT1`-style frame dump plus a JSON
/// description next to the metrics.
fn dump_batch(root: &Path, step: u64, idx: &[usize], pairs: &[FramePair], loss: &LossBreakdown) -> Result<()> {
    let info = serde_json::json!({
        "step": step,
        "pair_indices": idx,
        "loss": loss,
        "frames": "failed_batch.f32: per pair, older then newer 84x84 little-endian f32",
    });
    let p = root.join("failed_batch.json");
    fs::write(&p, serde_json::to_vec_pretty(&info)?).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    let mut raw = Vec::with_capacity(pairs.len() * 2 * FRAME_PIXELS * 4);
    for pair in pairs {
        for v in pair.prev.pixels.iter().chain(&pair.curr.pixels) {
            raw.extend_from_slice(&v.to_le_bytes());
        }
    }
    let p = root.join("failed_batch.f32");
    fs::write(&p, raw).map_err(|e| Error::io(format!("writing {}", p.display()), e))
}

/// Restores a segmentation network from a checkpoint written by [`pretrain`].
pub fn load_segnet(ck: &Checkpoint) -> Result<SegNet<f32>> {
    if ck.kind != SEGNET_KIND {
        return Err(Error::config("seg_checkpoint", format!("expected a {SEGNET_KIND} checkpoint, found {}", ck.kind)));
    }
    let cfg: SegCheckpointConfig = ck.config_as()?;
    let mut net = SegNet::zeros(cfg.network)?;
    ck.load_into("", &mut net)?;
    Ok(net)
}

/// Mean DSSIM between the two frames of each pair: the loss of predicting
/// no motion at all.
pub fn identity_baseline(pairs: &[FramePair]) -> Result<f64> {
    let mut acc = 0.0;
    for p in pairs {
        acc += dssim(&p.prev.pixels, &p.curr.pixels, FRAME_SIZE, FRAME_SIZE)? as f64;
    }
    Ok(acc / pairs.len().max(1) as f64)
}

/// Mean DSSIM between each older frame and its warped reconstruction.
pub fn reconstruction_dssim(net: &SegNet<f32>, pairs: &[FramePair], batch: usize) -> Result<f64> {
    let hw = FRAME_SIZE * FRAME_SIZE;
    let mut acc = 0.0;
    for chunk in pairs.chunks(batch.max(1)) {
        let x = pairs_to_activation::<f32>(chunk);
        let out = net.forward(&x)?;
        for i in 0..chunk.len() {
            let s = x.sample(i);
            let flow = compose_flow(out.sample_masks(i), out.k(), FRAME_SIZE, FRAME_SIZE, out.sample_translations(i), out.sample_camera(i))?;
            let rec = warp(&s[hw..], &flow)?;
            acc += dssim(&s[..hw], &rec, FRAME_SIZE, FRAME_SIZE)? as f64;
        }
    }
    Ok(acc / pairs.len().max(1) as f64)
}
