use serde::{Deserialize, Serialize};

use super::Parameterized;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 7e-4,
            alpha: 0.99,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam(AdamConfig),
    RmsProp(RmsPropConfig),
}

impl OptimizerKind {
    pub fn lr(&self) -> f64 {
        match self {
            OptimizerKind::Adam(c) => c.lr,
            OptimizerKind::RmsProp(c) => c.lr,
        }
    }

    pub fn build<T: Scalar>(&self) -> Optimizer<T> {
        match *self {
            OptimizerKind::Adam(c) => Optimizer::Adam(Adam::new(c)),
            OptimizerKind::RmsProp(c) => Optimizer::RmsProp(RmsProp::new(c)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<P: Parameterized<T>>(&mut self, params: &mut P, grads: &P) {
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let step = T::lit(c.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        let grads = grads.named_tensors();
        for (i, (p, (_, g))) in params.tensors_mut().into_iter().zip(grads).enumerate() {
            if self.m.len() <= i {
                self.m.push(vec![T::zero(); p.len()]);
                self.v.push(vec![T::zero(); p.len()]);
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gr;
                *vi = b2 * *vi + (T::one() - b2) * gr * gr;
                *w -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct RmsProp<T> {
    pub config: RmsPropConfig,
    pub t: u64,
    pub sq: Vec<Vec<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(config: RmsPropConfig) -> Self {
        Self {
            config,
            t: 0,
            sq: Vec::new(),
        }
    }

    pub fn step<P: Parameterized<T>>(&mut self, params: &mut P, grads: &P) {
        let c = self.config;
        self.t += 1;
        let (alpha, lr, eps) = (T::lit(c.alpha), T::lit(c.lr), T::lit(c.eps));
        let grads = grads.named_tensors();
        for (i, (p, (_, g))) in params.tensors_mut().into_iter().zip(grads).enumerate() {
            if self.sq.len() <= i {
                self.sq.push(vec![T::zero(); p.len()]);
            }
            for ((w, &gr), s) in p.data_mut().iter_mut().zip(g.data()).zip(self.sq[i].iter_mut()) {
                *s = alpha * *s + (T::one() - alpha) * gr * gr;
                *w -= lr * gr / (s.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Adam(Adam<T>),
    RmsProp(RmsProp<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn step<P: Parameterized<T>>(&mut self, params: &mut P, grads: &P) {
        match self {
            Optimizer::Adam(o) => o.step(params, grads),
            Optimizer::RmsProp(o) => o.step(params, grads),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        match self {
            Optimizer::Adam(o) => o.t,
            Optimizer::RmsProp(o) => o.t,
        }
    }

    /// Moment buffers by role, in parameter visiting order.
    pub fn moments(&self) -> Vec<(&'static str, &[Vec<T>])> {
        match self {
            Optimizer::Adam(o) => vec![("m", &o.m), ("v", &o.v)],
            Optimizer::RmsProp(o) => vec![("sq", &o.sq)],
        }
    }

    pub fn restore(&mut self, t: u64, moments: Vec<(String, Vec<Vec<T>>)>) {
        for (role, bufs) in moments {
            match (&mut *self, role.as_str()) {
                (Optimizer::Adam(o), "m") => o.m = bufs,
                (Optimizer::Adam(o), "v") => o.v = bufs,
                (Optimizer::RmsProp(o), "sq") => o.sq = bufs,
                _ => {}
            }
        }
        match self {
            Optimizer::Adam(o) => o.t = t,
            Optimizer::RmsProp(o) => o.t = t,
        }
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar, P: Parameterized<T>>(grads: &mut P, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    grads.visit("", &mut |_, t| sq += t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>());
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / (norm + 1e-6));
        grads.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    norm
}
