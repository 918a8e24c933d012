//! Motion segmentation from frame pairs and motion-oriented actor-critic
//! agents on a synthetic sprite environment.
//!
//! The crate is organised bottom-up: [`tensor`] and [`nn`] hold the
//! hand-written layers, [`motion`] the flow and loss operators,
//! [`segnet`] and [`segtrain`] the segmentation network and its
//! pretraining, [`agent`] the actor-critic, [`baselines`] the ablation
//! variants and [`viz`] the renderers.

pub mod agent;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod motion;
pub mod nn;
pub mod segnet;
pub mod segtrain;
pub mod tensor;
pub mod viz;

pub use agent::{ActorCritic, AgentConfig, Algo, Architecture, RolloutBatch, TrainConfig, UpdateConfig};
pub use baselines::Variant;
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use env::{EnvConfig, Frame, FramePair, GroundTruthMasks, SpriteWorld};
pub use error::{Error, Result};
pub use motion::{FlowField, LossBreakdown};
pub use segnet::{SegNet, SegNetConfig, SegOutput};
pub use segtrain::PretrainConfig;
pub use tensor::{Scalar, Tensor};
