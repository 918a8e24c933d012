//! Hand-written layers with explicit backward passes.
//!
//! Activations are batched `N×C×H×W` buffers in row-major order. Every layer
//! exposes `forward` plus a `backward` that accumulates parameter gradients
//! into a same-shaped "gradient twin" of the layer.

mod conv;
mod init;
mod linear;
mod optim;
mod params;
mod upsample;

pub use conv::Conv2d;
pub use init::{orthogonal, seeded_rng, GAIN_LINEAR, GAIN_RELU};
pub use linear::Linear;
pub use optim::{clip_global_norm, Adam, AdamConfig, Optimizer, OptimizerKind, RmsProp, RmsPropConfig};
pub use params::{join as params_join, param_count, param_digest, Parameterized};
pub use upsample::{upsample2x_backward, upsample2x_forward};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// A batch of feature maps, `n×c×h×w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Activation<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Activation<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "activation {n}x{c}x{h}x{w} needs {} values, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    /// Flat features per sample.
    pub fn features(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let f = self.features();
        &self.data[i * f..(i + 1) * f]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let f = self.features();
        &mut self.data[i * f..(i + 1) * f]
    }

    /// Reinterpret with a new per-sample layout of equal size.
    pub fn reshaped(mut self, c: usize, h: usize, w: usize) -> Self {
        assert_eq!(c * h * w, self.features(), "reshape must preserve size");
        self.c = c;
        self.h = h;
        self.w = w;
        self
    }

    pub fn relu_inplace(&mut self) {
        for v in &mut self.data {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    }

    /// Zero `self` wherever the post-ReLU output was not positive.
    pub fn relu_backward_inplace(&mut self, post_relu: &Activation<T>) {
        debug_assert_eq!(self.data.len(), post_relu.data.len());
        for (g, &y) in self.data.iter_mut().zip(&post_relu.data) {
            if y <= T::zero() {
                *g = T::zero();
            }
        }
    }
}
