use sha2::{Digest, Sha256};

use super::{Conv2d, Linear};
use crate::tensor::{Scalar, Tensor};

/// A model (or a same-shaped gradient twin) exposing its tensors by name.
///
/// Visiting order is fixed; optimizers and checkpoints rely on it.
pub trait Parameterized<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>));

    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |_, t| out.push(t));
        out
    }

    fn zero_(&mut self) {
        self.visit_mut("", &mut |_, t| t.fill(T::zero()));
    }

    /// A same-shaped copy with every value zero, used as a gradient buffer.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.zero_();
        z
    }

    /// `self += scale * other`, tensors matched by visiting order.
    fn add_scaled(&mut self, other: &Self, scale: T)
    where
        Self: Sized,
    {
        let src: Vec<&Tensor<T>> = other.named_tensors().into_iter().map(|(_, t)| t).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (d, &v) in dst.data_mut().iter_mut().zip(s.data()) {
                *d += scale * v;
            }
        }
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

pub fn param_count<T: Scalar, P: Parameterized<T> + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, t| n += t.len());
    n
}

/// SHA-256 over names, shapes and `f32` little-endian values.
///
/// Values are hashed at `f32` width, the precision checkpoints store.
pub fn param_digest<T: Scalar, P: Parameterized<T> + ?Sized>(p: &P) -> String {
    let mut h = Sha256::new();
    p.visit("", &mut |name, t| {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update((v.as_f64() as f32).to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}
