use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{orthogonal, params_join, seeded_rng, Activation, Linear, Parameterized, GAIN_LINEAR, GAIN_RELU};
use crate::segnet::{Encoder, EncoderTrace, SegNet, SegNetConfig, EMBED_DIM};
use crate::tensor::{Scalar, Tensor};

/// Gain for the policy logits layer, so the initial policy is near uniform.
const ACTOR_GAIN: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Motion path (segmentation network) and static path fused into
    /// shared actor and critic heads.
    Dual,
    /// A single encoder feeding the heads.
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub architecture: Architecture,
    pub segnet: SegNetConfig,
    pub num_actions: usize,
}

// one body per agent, so the variant size gap costs nothing
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum Body<T> {
    Dual {
        /// Motion path. Only its encoder feeds the policy; the mask decoder
        /// and translation head serve the joint segmentation loss.
        segnet: SegNet<T>,
        static_path: Encoder<T>,
        /// 1024 → 512 with ReLU.
        fusion: Linear<T>,
    },
    Standard {
        encoder: Encoder<T>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActorCritic<T> {
    pub config: AgentConfig,
    pub body: Body<T>,
    pub actor: Linear<T>,
    pub critic: Linear<T>,
}

/// Action probabilities (`n×|A|`, row-major) and state values.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput<T> {
    pub probs: Vec<T>,
    pub values: Vec<T>,
    pub num_actions: usize,
}

impl<T: Scalar> PolicyOutput<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.probs[i * self.num_actions..(i + 1) * self.num_actions]
    }
}

pub struct AgentTrace<T> {
    pub motion: EncoderTrace<T>,
    pub static_path: Option<EncoderTrace<T>>,
    pub concat: Vec<T>,
    /// Input of the heads after its ReLU.
    pub hidden: Vec<T>,
    pub logits: Vec<T>,
    pub values: Vec<T>,
}

impl<T: Scalar> ActorCritic<T> {
    pub fn zeros(config: AgentConfig) -> Result<Self> {
        config.segnet.validate()?;
        if config.num_actions == 0 {
            return Err(Error::config("num_actions", "must be positive"));
        }
        let fs = config.segnet.frame_size;
        let body = match config.architecture {
            Architecture::Dual => Body::Dual {
                segnet: SegNet::zeros(config.segnet)?,
                static_path: Encoder::new(fs, 2),
                fusion: Linear::new(2 * EMBED_DIM, EMBED_DIM),
            },
            Architecture::Standard => Body::Standard {
                encoder: Encoder::new(fs, 2),
            },
        };
        Ok(Self {
            config,
            body,
            actor: Linear::new(EMBED_DIM, config.num_actions),
            critic: Linear::new(EMBED_DIM, 1),
        })
    }

    /// Every parameter freshly initialized from `seed`.
    pub fn new(config: AgentConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = seeded_rng(seed);
        match &mut net.body {
            Body::Dual {
                segnet,
                static_path,
                fusion,
            } => {
                *segnet = SegNet::new(config.segnet, seed)?;
                // separate stream so the static path does not mirror the motion path
                let mut srng = seeded_rng(seed ^ 0x9e37_79b9_7f4a_7c15);
                static_path.init(&mut srng);
                init_linear(fusion, GAIN_RELU, &mut rng);
            }
            Body::Standard { encoder } => encoder.init(&mut rng),
        }
        init_linear(&mut net.actor, ACTOR_GAIN, &mut rng);
        init_linear(&mut net.critic, GAIN_LINEAR, &mut rng);
        Ok(net)
    }

    pub fn num_actions(&self) -> usize {
        self.config.num_actions
    }

    pub fn segnet(&self) -> Option<&SegNet<T>> {
        match &self.body {
            Body::Dual { segnet, .. } => Some(segnet),
            Body::Standard { .. } => None,
        }
    }

    pub fn motion_encoder(&self) -> &Encoder<T> {
        match &self.body {
            Body::Dual { segnet, .. } => &segnet.encoder,
            Body::Standard { encoder } => encoder,
        }
    }

    /// Overwrites the motion path with checkpoint tensors. With `whole_segnet`
    /// the decoder and translation head are copied too; otherwise only
    /// `encoder.*` is read.
    pub fn load_motion_path(&mut self, ck: &Checkpoint, whole_segnet: bool) -> Result<()> {
        match &mut self.body {
            Body::Dual { segnet, .. } if whole_segnet => ck.load_into("", segnet),
            Body::Dual { segnet, .. } => ck.load_into("encoder", &mut segnet.encoder),
            Body::Standard { encoder } => ck.load_into("encoder", encoder),
        }
    }

    fn check_input(&self, x: &Activation<T>) -> Result<()> {
        let s = self.config.segnet.frame_size;
        if x.c != 2 || x.h != s || x.w != s {
            return Err(Error::Argument(format!(
                "expected n×2×{s}×{s} observations, got {}×{}×{}×{}",
                x.n, x.c, x.h, x.w
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_trace(&self, x: &Activation<T>) -> Result<AgentTrace<T>> {
        self.check_input(x)?;
        let n = x.n;
        let (motion, static_path, concat, hidden) = match &self.body {
            Body::Dual {
                segnet,
                static_path,
                fusion,
            } => {
                let m = segnet.encoder.forward(x)?;
                let s = static_path.forward(x)?;
                let concat = concat_rows(&m.embedding, &s.embedding, n);
                let mut h = fusion.forward(&concat, n)?;
                h.iter_mut().for_each(|v| *v = v.max(T::zero()));
                (m, Some(s), concat, h)
            }
            Body::Standard { encoder } => {
                let m = encoder.forward(x)?;
                let h = m.embedding.clone();
                (m, None, Vec::new(), h)
            }
        };
        let logits = self.actor.forward(&hidden, n)?;
        let values = self.critic.forward(&hidden, n)?;
        Ok(AgentTrace {
            motion,
            static_path,
            concat,
            hidden,
            logits,
            values,
        })
    }

    /// Action distribution (softmax of the actor logits) and value estimate.
    pub fn act(&self, x: &Activation<T>) -> Result<PolicyOutput<T>> {
        let tr = self.forward_trace(x)?;
        Ok(PolicyOutput {
            probs: tr.logits.chunks_exact(self.num_actions()).flat_map(softmax).collect(),
            values: tr.values,
            num_actions: self.num_actions(),
        })
    }

    /// Backpropagates head gradients. `d_motion_extra` is added to the
    /// motion-path embedding gradient (the joint segmentation loss).
    pub(crate) fn backward(
        &self,
        tr: &AgentTrace<T>,
        d_logits: &[T],
        d_values: &[T],
        d_motion_extra: Option<&[T]>,
        grad: &mut ActorCritic<T>,
    ) -> Result<()> {
        let n = tr.values.len();
        let mut d_hidden = self.actor.backward(&tr.hidden, d_logits, n, &mut grad.actor, true).expect("dx");
        let d_h2 = self.critic.backward(&tr.hidden, d_values, n, &mut grad.critic, true).expect("dx");
        for (a, b) in d_hidden.iter_mut().zip(d_h2) {
            *a += b;
        }
        match (&self.body, &mut grad.body) {
            (
                Body::Dual {
                    segnet,
                    static_path,
                    fusion,
                },
                Body::Dual {
                    segnet: g_seg,
                    static_path: g_static,
                    fusion: g_fusion,
                },
            ) => {
                for (g, &h) in d_hidden.iter_mut().zip(&tr.hidden) {
                    if h <= T::zero() {
                        *g = T::zero();
                    }
                }
                let d_concat = fusion.backward(&tr.concat, &d_hidden, n, g_fusion, true).expect("dx");
                let (mut d_m, d_s) = split_rows(&d_concat, n);
                if let Some(extra) = d_motion_extra {
                    for (a, &b) in d_m.iter_mut().zip(extra) {
                        *a += b;
                    }
                }
                static_path.backward(tr.static_path.as_ref().expect("dual trace"), &d_s, g_static)?;
                segnet.encoder.backward(&tr.motion, &d_m, &mut g_seg.encoder)
            }
            (Body::Standard { encoder }, Body::Standard { encoder: g }) => {
                if let Some(extra) = d_motion_extra {
                    for (a, &b) in d_hidden.iter_mut().zip(extra) {
                        *a += b;
                    }
                }
                encoder.backward(&tr.motion, &d_hidden, g)
            }
            _ => Err(Error::State("gradient buffer architecture differs from model".into())),
        }
    }
}

/// Dual-path agent whose motion path is the pretrained segmentation network
/// in `ck`; everything else is freshly initialized from `seed`.
pub fn transfer_weights(ck: &Checkpoint, seed: u64, num_actions: usize) -> Result<ActorCritic<f32>> {
    let net = crate::segtrain::load_segnet(ck)?;
    let mut agent = ActorCritic::new(
        AgentConfig {
            architecture: Architecture::Dual,
            segnet: net.config,
            num_actions,
        },
        seed,
    )?;
    if let Body::Dual { segnet, .. } = &mut agent.body {
        *segnet = net;
    }
    Ok(agent)
}

fn init_linear<T: Scalar>(l: &mut Linear<T>, gain: f64, rng: &mut ChaCha8Rng) {
    orthogonal(&mut l.weight, gain, rng);
    l.bias.fill(T::zero());
}

pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    z.iter().map(|&v| v - lse).collect()
}

fn concat_rows<T: Scalar>(a: &[T], b: &[T], n: usize) -> Vec<T> {
    let (da, db) = (a.len() / n, b.len() / n);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        out.extend_from_slice(&a[i * da..(i + 1) * da]);
        out.extend_from_slice(&b[i * db..(i + 1) * db]);
    }
    out
}

fn split_rows<T: Scalar>(x: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    let half = x.len() / n / 2;
    let mut a = Vec::with_capacity(n * half);
    let mut b = Vec::with_capacity(n * half);
    for row in x.chunks_exact(2 * half) {
        a.extend_from_slice(&row[..half]);
        b.extend_from_slice(&row[half..]);
    }
    (a, b)
}

impl<T: Scalar> Parameterized<T> for ActorCritic<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        match &self.body {
            Body::Dual {
                segnet,
                static_path,
                fusion,
            } => {
                segnet.visit(&params_join(prefix, "motion"), f);
                static_path.visit(&params_join(prefix, "static"), f);
                fusion.visit(&params_join(prefix, "fusion"), f);
            }
            Body::Standard { encoder } => encoder.visit(&params_join(prefix, "encoder"), f),
        }
        self.actor.visit(&params_join(prefix, "actor"), f);
        self.critic.visit(&params_join(prefix, "critic"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        match &mut self.body {
            Body::Dual {
                segnet,
                static_path,
                fusion,
            } => {
                segnet.visit_mut(&params_join(prefix, "motion"), f);
                static_path.visit_mut(&params_join(prefix, "static"), f);
                fusion.visit_mut(&params_join(prefix, "fusion"), f);
            }
            Body::Standard { encoder } => encoder.visit_mut(&params_join(prefix, "encoder"), f),
        }
        self.actor.visit_mut(&params_join(prefix, "actor"), f);
        self.critic.visit_mut(&params_join(prefix, "critic"), f);
    }
}
