//! Segmentation network: frame pair → 512-d embedding → K soft object masks,
//! K object translations and one camera translation.
//!
//! There are no skip connections; the decoder and the translation head see
//! only the embedding.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    orthogonal, upsample2x_backward, upsample2x_forward, Activation, Conv2d, Linear, Parameterized, GAIN_LINEAR,
    GAIN_RELU,
};
use crate::nn::seeded_rng;
use crate::tensor::{sigmoid, Scalar, Tensor};

pub const FRAME_SIZE: usize = 84;
pub const EMBED_DIM: usize = 512;
pub const DECODER_CHANNELS: usize = 24;
pub const DEFAULT_K: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegNetConfig {
    /// Number of object masks.
    pub k: usize,
    /// Side of the square input frames; 84 for the standard network.
    pub frame_size: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            frame_size: FRAME_SIZE,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "need at least one object mask"));
        }
        if !self.frame_size.is_multiple_of(4) || encoder_spatial(self.frame_size).is_none() {
            return Err(Error::config(
                "frame_size",
                format!("{} is not divisible by 4 or too small for the encoder (min 36)", self.frame_size),
            ));
        }
        Ok(())
    }

    /// Side of the decoder's first feature grid (21 for 84×84 frames).
    pub fn grid(&self) -> usize {
        self.frame_size / 4
    }
}

/// Spatial size after the three valid convolutions.
fn encoder_spatial(frame: usize) -> Option<usize> {
    if frame < 8 {
        return None;
    }
    let a = (frame - 8) / 4 + 1;
    if a < 4 {
        return None;
    }
    let b = (a - 4) / 2 + 1;
    if b < 3 {
        return None;
    }
    Some(b - 2)
}

/// Three-conv + fc encoder shared by the segmentation network and the agent.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub conv3: Conv2d<T>,
    pub fc: Linear<T>,
}

pub struct EncoderTrace<T> {
    input: Activation<T>,
    a1: Activation<T>,
    a2: Activation<T>,
    a3: Activation<T>,
    pub embedding: Vec<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(frame_size: usize, in_channels: usize) -> Self {
        let s = encoder_spatial(frame_size).expect("frame size validated by caller");
        Self {
            conv1: Conv2d::new(in_channels, 32, 8, 4, 0),
            conv2: Conv2d::new(32, 64, 4, 2, 0),
            conv3: Conv2d::new(64, 64, 3, 1, 0),
            fc: Linear::new(64 * s * s, EMBED_DIM),
        }
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        for conv in [&mut self.conv1, &mut self.conv2, &mut self.conv3] {
            orthogonal(&mut conv.weight, GAIN_RELU, rng);
            conv.bias.fill(T::zero());
        }
        orthogonal(&mut self.fc.weight, GAIN_RELU, rng);
        self.fc.bias.fill(T::zero());
    }

    pub fn forward(&self, x: &Activation<T>) -> Result<EncoderTrace<T>> {
        let mut a1 = self.conv1.forward(x)?;
        a1.relu_inplace();
        let mut a2 = self.conv2.forward(&a1)?;
        a2.relu_inplace();
        let mut a3 = self.conv3.forward(&a2)?;
        a3.relu_inplace();
        let mut embedding = self.fc.forward(&a3.data, x.n)?;
        embedding.iter_mut().for_each(|v| *v = v.max(T::zero()));
        Ok(EncoderTrace {
            input: x.clone(),
            a1,
            a2,
            a3,
            embedding,
        })
    }

    /// Backpropagates `d_embedding` (n×512) into `grad`. Input gradients are
    /// not needed by any caller.
    pub fn backward(&self, trace: &EncoderTrace<T>, d_embedding: &[T], grad: &mut Encoder<T>) -> Result<()> {
        let n = trace.input.n;
        let mut de = d_embedding.to_vec();
        for (g, &y) in de.iter_mut().zip(&trace.embedding) {
            if y <= T::zero() {
                *g = T::zero();
            }
        }
        let da3 = self.fc.backward(&trace.a3.data, &de, n, &mut grad.fc, true).unwrap();
        let mut da3 = Activation::from_vec(n, trace.a3.c, trace.a3.h, trace.a3.w, da3)?;
        da3.relu_backward_inplace(&trace.a3);
        let mut da2 = self.conv3.backward(&trace.a2, &da3, &mut grad.conv3, true)?.unwrap();
        da2.relu_backward_inplace(&trace.a2);
        let mut da1 = self.conv2.backward(&trace.a1, &da2, &mut grad.conv2, true)?.unwrap();
        da1.relu_backward_inplace(&trace.a1);
        self.conv1.backward(&trace.input, &da1, &mut grad.conv1, false)?;
        Ok(())
    }
}

impl<T: Scalar> Parameterized<T> for Encoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.conv1.visit(&crate::nn::params_join(prefix, "conv1"), f);
        self.conv2.visit(&crate::nn::params_join(prefix, "conv2"), f);
        self.conv3.visit(&crate::nn::params_join(prefix, "conv3"), f);
        self.fc.visit(&crate::nn::params_join(prefix, "fc"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        self.conv1.visit_mut(&crate::nn::params_join(prefix, "conv1"), f);
        self.conv2.visit_mut(&crate::nn::params_join(prefix, "conv2"), f);
        self.conv3.visit_mut(&crate::nn::params_join(prefix, "conv3"), f);
        self.fc.visit_mut(&crate::nn::params_join(prefix, "fc"), f);
    }
}

/// Embedding → per-pixel outputs via fc, reshape, and two (upsample, conv)
/// stages. `out_channels` is K for masks and 1 for the autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub fc: Linear<T>,
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub head: Conv2d<T>,
    grid: usize,
}

pub struct DecoderTrace<T> {
    embedding: Vec<T>,
    h0: Activation<T>,
    u1: Activation<T>,
    c1: Activation<T>,
    u2: Activation<T>,
    c2: Activation<T>,
    /// Head output before the final nonlinearity.
    pub logits: Activation<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(frame_size: usize, out_channels: usize) -> Self {
        let grid = frame_size / 4;
        Self {
            fc: Linear::new(EMBED_DIM, DECODER_CHANNELS * grid * grid),
            conv1: Conv2d::new(DECODER_CHANNELS, DECODER_CHANNELS, 3, 1, 1),
            conv2: Conv2d::new(DECODER_CHANNELS, DECODER_CHANNELS, 3, 1, 1),
            head: Conv2d::new(DECODER_CHANNELS, out_channels, 1, 1, 0),
            grid,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.head.c_out()
    }

    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        orthogonal(&mut self.fc.weight, GAIN_RELU, rng);
        orthogonal(&mut self.conv1.weight, GAIN_RELU, rng);
        orthogonal(&mut self.conv2.weight, GAIN_RELU, rng);
        orthogonal(&mut self.head.weight, GAIN_LINEAR, rng);
        for b in [&mut self.fc.bias, &mut self.conv1.bias, &mut self.conv2.bias, &mut self.head.bias] {
            b.fill(T::zero());
        }
    }

    pub fn forward(&self, embedding: &[T], n: usize) -> Result<DecoderTrace<T>> {
        let mut h0 = self.fc.forward(embedding, n)?;
        h0.iter_mut().for_each(|v| *v = v.max(T::zero()));
        let h0 = Activation::from_vec(n, DECODER_CHANNELS, self.grid, self.grid, h0)?;
        let u1 = upsample2x_forward(&h0);
        let mut c1 = self.conv1.forward(&u1)?;
        c1.relu_inplace();
        let u2 = upsample2x_forward(&c1);
        let mut c2 = self.conv2.forward(&u2)?;
        c2.relu_inplace();
        let logits = self.head.forward(&c2)?;
        Ok(DecoderTrace {
            embedding: embedding.to_vec(),
            h0,
            u1,
            c1,
            u2,
            c2,
            logits,
        })
    }

    /// Takes the gradient w.r.t. the head logits; returns d(embedding).
    pub fn backward(&self, trace: &DecoderTrace<T>, d_logits: &Activation<T>, grad: &mut Decoder<T>) -> Result<Vec<T>> {
        let n = trace.h0.n;
        let mut dc2 = self.head.backward(&trace.c2, d_logits, &mut grad.head, true)?.unwrap();
        dc2.relu_backward_inplace(&trace.c2);
        let du2 = self.conv2.backward(&trace.u2, &dc2, &mut grad.conv2, true)?.unwrap();
        let mut dc1 = upsample2x_backward(&du2);
        dc1.relu_backward_inplace(&trace.c1);
        let du1 = self.conv1.backward(&trace.u1, &dc1, &mut grad.conv1, true)?.unwrap();
        let mut dh0 = upsample2x_backward(&du1);
        dh0.relu_backward_inplace(&trace.h0);
        Ok(self.fc.backward(&trace.embedding, &dh0.data, n, &mut grad.fc, true).unwrap())
    }
}

impl<T: Scalar> Parameterized<T> for Decoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.fc.visit(&crate::nn::params_join(prefix, "fc"), f);
        self.conv1.visit(&crate::nn::params_join(prefix, "conv1"), f);
        self.conv2.visit(&crate::nn::params_join(prefix, "conv2"), f);
        self.head.visit(&crate::nn::params_join(prefix, "head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        self.fc.visit_mut(&crate::nn::params_join(prefix, "fc"), f);
        self.conv1.visit_mut(&crate::nn::params_join(prefix, "conv1"), f);
        self.conv2.visit_mut(&crate::nn::params_join(prefix, "conv2"), f);
        self.head.visit_mut(&crate::nn::params_join(prefix, "head"), f);
    }
}

/// Output of the segmentation network for a batch of `n` frame pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SegOutput<T> {
    /// `n×K×H×W`, each value in (0,1).
    pub masks: Activation<T>,
    /// `n×K×2` as (dx, dy) in pixels.
    pub object_translations: Vec<T>,
    /// `n×2`
    pub camera_translation: Vec<T>,
    /// `n×512`
    pub embedding: Vec<T>,
}

impl<T: Scalar> SegOutput<T> {
    pub fn batch(&self) -> usize {
        self.masks.n
    }

    pub fn k(&self) -> usize {
        self.masks.c
    }

    pub fn sample_masks(&self, i: usize) -> &[T] {
        self.masks.sample(i)
    }

    pub fn sample_translations(&self, i: usize) -> &[T] {
        let k = self.k();
        &self.object_translations[i * 2 * k..(i + 1) * 2 * k]
    }

    pub fn sample_camera(&self, i: usize) -> [T; 2] {
        [self.camera_translation[2 * i], self.camera_translation[2 * i + 1]]
    }
}

/// Everything the backward pass needs from a forward evaluation.
pub struct SegTrace<T> {
    pub encoder: EncoderTrace<T>,
    pub decoder: DecoderTrace<T>,
    pub output: SegOutput<T>,
}

/// Gradients of a scalar loss w.r.t. the network outputs.
pub struct SegOutputGrad<T> {
    pub masks: Activation<T>,
    pub object_translations: Vec<T>,
    pub camera_translation: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNet<T> {
    pub config: SegNetConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    /// 512 → (K+1)·2; rows 0..K are object translations, row K the camera.
    pub translation: Linear<T>,
}

impl<T: Scalar> SegNet<T> {
    /// All-zero parameters.
    pub fn zeros(config: SegNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            encoder: Encoder::new(config.frame_size, 2),
            decoder: Decoder::new(config.frame_size, config.k),
            translation: Linear::new(EMBED_DIM, (config.k + 1) * 2),
        })
    }

    /// Orthogonal initialization from `seed`.
    pub fn new(config: SegNetConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = seeded_rng(seed);
        net.encoder.init(&mut rng);
        net.decoder.init(&mut rng);
        orthogonal(&mut net.translation.weight, GAIN_LINEAR, &mut rng);
        Ok(net)
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub(crate) fn check_input(&self, x: &Activation<T>) -> Result<()> {
        let s = self.config.frame_size;
        if x.c != 2 || x.h != s || x.w != s {
            return Err(Error::Argument(format!(
                "expected n×2×{s}×{s} frame pairs, got {}×{}×{}×{}",
                x.n, x.c, x.h, x.w
            )));
        }
        Ok(())
    }

    fn check_embedding(&self, embedding: &[T], n: usize) -> Result<()> {
        if embedding.len() != n * EMBED_DIM {
            return Err(Error::Argument(format!(
                "expected {n}×{EMBED_DIM} embedding values, got {}",
                embedding.len()
            )));
        }
        Ok(())
    }

    /// Frame pairs (`n×2×H×W`, channel 0 the older frame) → `n×512`.
    pub fn encode(&self, x: &Activation<T>) -> Result<Vec<T>> {
        self.check_input(x)?;
        Ok(self.encoder.forward(x)?.embedding)
    }

    pub fn decode_masks(&self, embedding: &[T], n: usize) -> Result<Activation<T>> {
        self.check_embedding(embedding, n)?;
        let mut m = self.decoder.forward(embedding, n)?.logits;
        m.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok(m)
    }

    /// Returns (`n×K×2` object translations, `n×2` camera translations).
    pub fn predict_translations(&self, embedding: &[T], n: usize) -> Result<(Vec<T>, Vec<T>)> {
        self.check_embedding(embedding, n)?;
        let raw = self.translation.forward(embedding, n)?;
        Ok(split_translations(&raw, n, self.k()))
    }

    pub fn forward(&self, x: &Activation<T>) -> Result<SegOutput<T>> {
        Ok(self.forward_trace(x)?.output)
    }

    /// Decoder outputs from an embedding alone.
    pub fn decode(&self, embedding: Vec<T>, n: usize) -> Result<SegOutput<T>> {
        let masks = self.decode_masks(&embedding, n)?;
        let (object_translations, camera_translation) = self.predict_translations(&embedding, n)?;
        Ok(SegOutput {
            masks,
            object_translations,
            camera_translation,
            embedding,
        })
    }

    pub fn forward_trace(&self, x: &Activation<T>) -> Result<SegTrace<T>> {
        self.check_input(x)?;
        let encoder = self.encoder.forward(x)?;
        let (decoder, output) = self.heads_trace(encoder.embedding.clone(), x.n)?;
        Ok(SegTrace {
            encoder,
            decoder,
            output,
        })
    }

    /// Mask decoder and translation head on `n` embeddings, keeping what
    /// [`SegNet::heads_backward`] needs.
    pub fn heads_trace(&self, embedding: Vec<T>, n: usize) -> Result<(DecoderTrace<T>, SegOutput<T>)> {
        self.check_embedding(&embedding, n)?;
        let decoder = self.decoder.forward(&embedding, n)?;
        let mut masks = decoder.logits.clone();
        masks.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let raw = self.translation.forward(&embedding, n)?;
        let (object_translations, camera_translation) = split_translations(&raw, n, self.k());
        let output = SegOutput {
            masks,
            object_translations,
            camera_translation,
            embedding,
        };
        Ok((decoder, output))
    }

    /// Accumulates decoder and translation-head gradients; returns the
    /// gradient w.r.t. the embedding.
    pub fn heads_backward(
        &self,
        decoder: &DecoderTrace<T>,
        output: &SegOutput<T>,
        d_out: &SegOutputGrad<T>,
        grad: &mut SegNet<T>,
    ) -> Result<Vec<T>> {
        let n = output.batch();
        let k = self.k();
        let mut d_logits = d_out.masks.clone();
        for (g, &m) in d_logits.data.iter_mut().zip(&output.masks.data) {
            *g *= m * (T::one() - m);
        }
        let mut d_emb = self.decoder.backward(decoder, &d_logits, &mut grad.decoder)?;
        let mut d_raw = vec![T::zero(); n * (k + 1) * 2];
        for i in 0..n {
            let row = &mut d_raw[i * (k + 1) * 2..(i + 1) * (k + 1) * 2];
            row[..2 * k].copy_from_slice(&d_out.object_translations[i * 2 * k..(i + 1) * 2 * k]);
            row[2 * k..].copy_from_slice(&d_out.camera_translation[2 * i..2 * i + 2]);
        }
        let d_emb_t = self
            .translation
            .backward(&output.embedding, &d_raw, n, &mut grad.translation, true)
            .expect("input gradient requested");
        for (a, b) in d_emb.iter_mut().zip(d_emb_t) {
            *a += b;
        }
        Ok(d_emb)
    }

    /// Backpropagates output gradients into `grad`. `extra_embedding_grad`
    /// lets a caller (the agent) inject gradients from other consumers of
    /// the embedding.
    pub fn backward(
        &self,
        trace: &SegTrace<T>,
        d_out: &SegOutputGrad<T>,
        extra_embedding_grad: Option<&[T]>,
        grad: &mut SegNet<T>,
    ) -> Result<()> {
        let mut d_emb = self.heads_backward(&trace.decoder, &trace.output, d_out, grad)?;
        if let Some(extra) = extra_embedding_grad {
            for (a, &b) in d_emb.iter_mut().zip(extra) {
                *a += b;
            }
        }
        self.encoder.backward(&trace.encoder, &d_emb, &mut grad.encoder)
    }
}

fn split_translations<T: Scalar>(raw: &[T], n: usize, k: usize) -> (Vec<T>, Vec<T>) {
    let mut obj = Vec::with_capacity(n * k * 2);
    let mut cam = Vec::with_capacity(n * 2);
    for row in raw.chunks_exact((k + 1) * 2) {
        obj.extend_from_slice(&row[..2 * k]);
        cam.extend_from_slice(&row[2 * k..]);
    }
    (obj, cam)
}

impl<T: Scalar> Parameterized<T> for SegNet<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.encoder.visit(&crate::nn::params_join(prefix, "encoder"), f);
        self.decoder.visit(&crate::nn::params_join(prefix, "decoder"), f);
        self.translation.visit(&crate::nn::params_join(prefix, "translation"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        self.encoder.visit_mut(&crate::nn::params_join(prefix, "encoder"), f);
        self.decoder.visit_mut(&crate::nn::params_join(prefix, "decoder"), f);
        self.translation.visit_mut(&crate::nn::params_join(prefix, "translation"), f);
    }
}
