//! Ablation variants and the autoencoder pretraining baseline.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agent::{transfer_weights, ActorCritic, AgentConfig, Architecture, Body, UpdateRecord};
use crate::checkpoint::Checkpoint;
use crate::env::{Dataset, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::motion::LossBreakdown;
use crate::nn::{seeded_rng, Activation, Parameterized};
use crate::segnet::{Decoder, Encoder, SegNetConfig, FRAME_SIZE};
use crate::segtrain::{run_loop, PretrainConfig, PretrainOutcome, SegCheckpointConfig, SEGNET_KIND};
use crate::tensor::{sigmoid, Scalar, Tensor};

pub const AUTOENCODER_KIND: &str = "autoencoder";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MorelJoint,
    MorelTransferOnly,
    BaselineStandard,
    BaselineDouble,
    BaselineAutoencoder,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::MorelJoint,
        Variant::MorelTransferOnly,
        Variant::BaselineStandard,
        Variant::BaselineDouble,
        Variant::BaselineAutoencoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MorelJoint => "morel_joint",
            Variant::MorelTransferOnly => "morel_transfer_only",
            Variant::BaselineStandard => "baseline_standard",
            Variant::BaselineDouble => "baseline_double",
            Variant::BaselineAutoencoder => "baseline_autoencoder",
        }
    }

    /// Checkpoint kind the variant is initialized from, if any.
    pub fn required_checkpoint(self) -> Option<&'static str> {
        match self {
            Variant::MorelJoint | Variant::MorelTransferOnly => Some(SEGNET_KIND),
            Variant::BaselineAutoencoder => Some(AUTOENCODER_KIND),
            Variant::BaselineStandard | Variant::BaselineDouble => None,
        }
    }

    /// x-axis shift for learning curves: pretrained variants are charged
    /// for the frames their initialization consumed.
    pub fn curve_offset(self, pretrain_frames: u64) -> u64 {
        if self.required_checkpoint().is_some() {
            pretrain_frames
        } else {
            0
        }
    }

    pub fn joint_seg(self) -> bool {
        self == Variant::MorelJoint
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown variant {s:?}")))
    }
}

/// A ready-to-train agent plus what the training loop needs to know about it.
pub struct BuiltVariant {
    pub variant: Variant,
    pub agent: ActorCritic<f32>,
    pub joint_seg: bool,
    /// Frames consumed by pretraining; added to the x-axis of learning curves.
    pub pretrain_frames: u64,
}

/// Builds the agent for `variant`. Pretrained variants need `checkpoint` of
/// the matching kind; the others ignore it. `segnet` fixes the motion-path
/// shape of randomly initialized dual agents.
pub fn build_variant(variant: Variant, seed: u64, checkpoint: Option<&Checkpoint>, segnet: SegNetConfig) -> Result<BuiltVariant> {
    let ck = match (variant.required_checkpoint(), checkpoint) {
        (None, _) => None,
        (Some(kind), None) => {
            return Err(Error::config(
                "seg_checkpoint",
                format!("variant {variant} needs a {kind} checkpoint"),
            ))
        }
        (Some(kind), Some(ck)) if ck.kind != kind => {
            return Err(Error::config(
                "seg_checkpoint",
                format!("variant {variant} needs a {kind} checkpoint, got {}", ck.kind),
            ))
        }
        (Some(_), Some(ck)) => Some(ck),
    };
    let dual = |cfg: SegNetConfig| AgentConfig {
        architecture: Architecture::Dual,
        segnet: cfg,
        num_actions: NUM_ACTIONS,
    };
    let (agent, pretrain_frames) = match variant {
        Variant::MorelJoint | Variant::MorelTransferOnly => {
            let ck = ck.expect("checked above");
            let frames = ck.config_as::<SegCheckpointConfig>()?.dataset_frames;
            (transfer_weights(ck, seed, NUM_ACTIONS)?, frames)
        }
        Variant::BaselineStandard => (
            ActorCritic::new(
                AgentConfig {
                    architecture: Architecture::Standard,
                    segnet,
                    num_actions: NUM_ACTIONS,
                },
                seed,
            )?,
            0,
        ),
        Variant::BaselineDouble => (ActorCritic::new(dual(segnet), seed)?, 0),
        Variant::BaselineAutoencoder => {
            let ck = ck.expect("checked above");
            let cfg: AutoencoderCheckpointConfig = ck.config_as()?;
            let mut agent = ActorCritic::new(
                dual(SegNetConfig {
                    frame_size: cfg.frame_size,
                    ..segnet
                }),
                seed,
            )?;
            if let Body::Dual { segnet, .. } = &mut agent.body {
                ck.load_into("encoder", &mut segnet.encoder)?;
            }
            (agent, cfg.dataset_frames)
        }
    };
    Ok(BuiltVariant {
        variant,
        agent,
        joint_seg: variant.joint_seg(),
        pretrain_frames,
    })
}

/// The segmentation network's encoder and decoder skeleton with a single
/// sigmoid output channel and no translation head.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    frame_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderCheckpointConfig {
    pub frame_size: usize,
    pub pretrain: PretrainConfig,
    pub dataset_frames: u64,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn zeros(frame_size: usize) -> Result<Self> {
        SegNetConfig { k: 1, frame_size }.validate()?;
        Ok(Self {
            encoder: Encoder::new(frame_size, 2),
            decoder: Decoder::new(frame_size, 1),
            frame_size,
        })
    }

    pub fn new(frame_size: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(frame_size)?;
        let mut rng = seeded_rng(seed);
        net.encoder.init(&mut rng);
        net.decoder.init(&mut rng);
        Ok(net)
    }

    /// Reconstruction of the newer frame, `n×1×H×W`.
    pub fn forward(&self, x: &Activation<T>) -> Result<Activation<T>> {
        let e = self.encoder.forward(x)?;
        let mut y = self.decoder.forward(&e.embedding, x.n)?.logits;
        y.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok(y)
    }

    /// Mean squared error against the newer frame; accumulates gradients.
    pub fn loss_and_grad(&self, x: &Activation<T>, grad: &mut Self) -> Result<f64> {
        if x.c != 2 || x.h != self.frame_size || x.w != self.frame_size {
            return Err(Error::Argument(format!("autoencoder expects n×2×{0}×{0} input", self.frame_size)));
        }
        let hw = x.h * x.w;
        let e = self.encoder.forward(x)?;
        let tr = self.decoder.forward(&e.embedding, x.n)?;
        let scale = 1.0 / (x.n * hw) as f64;
        let mut d = tr.logits.clone();
        let mut mse = 0.0;
        for i in 0..x.n {
            let target = &x.sample(i)[hw..];
            let z = &tr.logits.data[i * hw..(i + 1) * hw];
            for j in 0..hw {
                let y = sigmoid(z[j]);
                let r = (y - target[j]).as_f64();
                mse += r * r * scale;
                d.data[i * hw + j] = T::lit(2.0 * r * scale) * y * (T::one() - y);
            }
        }
        let d_emb = self.decoder.backward(&tr, &d, &mut grad.decoder)?;
        self.encoder.backward(&e, &d_emb, &mut grad.encoder)?;
        Ok(mse)
    }
}

impl<T: Scalar> Parameterized<T> for Autoencoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.encoder.visit(&crate::nn::params_join(prefix, "encoder"), f);
        self.decoder.visit(&crate::nn::params_join(prefix, "decoder"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        self.encoder.visit_mut(&crate::nn::params_join(prefix, "encoder"), f);
        self.decoder.visit_mut(&crate::nn::params_join(prefix, "decoder"), f);
    }
}

/// Same optimizer, batch size and step budget as segmentation pretraining;
/// the curriculum weight is logged but multiplies nothing.
pub fn pretrain_autoencoder(
    dataset: &mut Dataset,
    config: &PretrainConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome<Autoencoder<f32>>> {
    config.validate()?;
    let net = Autoencoder::<f32>::new(FRAME_SIZE, config.seed)?;
    let ck_config = AutoencoderCheckpointConfig {
        frame_size: FRAME_SIZE,
        pretrain: config.clone(),
        dataset_frames: dataset.header().frame_count,
    };
    run_loop(dataset, config, out_dir, AUTOENCODER_KIND, &ck_config, net, |net, grads, x, lambda| {
        let mse = net.loss_and_grad(x, grads)?;
        Ok(LossBreakdown::new(mse, 0.0, lambda))
    })
}

/// One row of the merged comparison summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub seed: u64,
    pub env_steps: u64,
    pub mean_return: Option<f64>,
}

/// Summary rows for one run. Env steps are as trained; the pretraining
/// offset is applied when curves are drawn.
pub fn summary_rows(variant: Variant, seed: u64, history: &[UpdateRecord]) -> Vec<SummaryRow> {
    history
        .iter()
        .map(|r| SummaryRow {
            variant: variant.name().into(),
            seed,
            env_steps: r.env_steps,
            mean_return: r.mean_return,
        })
        .collect()
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<SummaryRow>, _>>()?;
    Ok(rows)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// First logged env-step count (plus `offset`) at which the rolling mean
/// return reaches `threshold`.
pub fn steps_to_threshold(history: &[UpdateRecord], threshold: f64, offset: u64) -> Option<u64> {
    history
        .iter()
        .find(|r| r.mean_return.is_some_and(|m| m >= threshold))
        .map(|r| r.env_steps + offset)
}

/// Median of a non-empty slice; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
