use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Scalar, Tensor};

pub const GAIN_RELU: f64 = std::f64::consts::SQRT_2;
pub const GAIN_LINEAR: f64 = 1.0;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fills `weight` (first axis = fan-out) with a scaled (semi-)orthogonal matrix.
///
/// The tensor is viewed as `rows × cols` with `rows = shape[0]`.
pub fn orthogonal<T: Scalar>(weight: &mut Tensor<T>, gain: f64, rng: &mut ChaCha8Rng) {
    let rows = weight.shape()[0];
    let cols = weight.len() / rows;
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let gauss = DMatrix::<f64>::from_fn(tall, short, |_, _| StandardNormal.sample(rng));
    let qr = gauss.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let data = weight.data_mut();
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            data[i * cols + j] = T::lit(gain * v);
        }
    }
}
