//! Factor-2 bilinear upsampling, half-pixel (align_corners = false) convention.
//!
//! Output index `o` samples source coordinate `(o + 0.5) / 2 - 0.5`, clamped
//! below at 0; the upper neighbour is clamped to the last row/column.

use super::Activation;
use crate::tensor::Scalar;

struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn taps<T: Scalar>(len: usize) -> Vec<Tap<T>> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            Tap {
                lo,
                hi,
                frac: T::lit(src - lo as f64),
            }
        })
        .collect()
}

pub fn upsample2x_forward<T: Scalar>(x: &Activation<T>) -> Activation<T> {
    let (h, w) = (x.h, x.w);
    let (ho, wo) = (2 * h, 2 * w);
    let ty = taps::<T>(h);
    let tx = taps::<T>(w);
    let mut out = Activation::zeros(x.n, x.c, ho, wo);
    let mut rows = vec![T::zero(); ho * w];
    for (src, dst) in x.data.chunks_exact(h * w).zip(out.data.chunks_exact_mut(ho * wo)) {
        for (oy, t) in ty.iter().enumerate() {
            let (a, b) = (&src[t.lo * w..][..w], &src[t.hi * w..][..w]);
            let r = &mut rows[oy * w..][..w];
            for j in 0..w {
                r[j] = a[j] + t.frac * (b[j] - a[j]);
            }
        }
        for oy in 0..ho {
            let r = &rows[oy * w..][..w];
            let d = &mut dst[oy * wo..][..wo];
            for (ox, t) in tx.iter().enumerate() {
                d[ox] = r[t.lo] + t.frac * (r[t.hi] - r[t.lo]);
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x_forward`]; `dy` has the upsampled shape.
pub fn upsample2x_backward<T: Scalar>(dy: &Activation<T>) -> Activation<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let (ho, wo) = (dy.h, dy.w);
    let ty = taps::<T>(h);
    let tx = taps::<T>(w);
    let mut dx = Activation::zeros(dy.n, dy.c, h, w);
    let mut rows = vec![T::zero(); ho * w];
    for (src, dst) in dy.data.chunks_exact(ho * wo).zip(dx.data.chunks_exact_mut(h * w)) {
        rows.fill(T::zero());
        for oy in 0..ho {
            let g = &src[oy * wo..][..wo];
            let r = &mut rows[oy * w..][..w];
            for (ox, t) in tx.iter().enumerate() {
                r[t.lo] += (T::one() - t.frac) * g[ox];
                r[t.hi] += t.frac * g[ox];
            }
        }
        for (oy, t) in ty.iter().enumerate() {
            let r = &rows[oy * w..][..w];
            for j in 0..w {
                dst[t.lo * w + j] += (T::one() - t.frac) * r[j];
                dst[t.hi * w + j] += t.frac * r[j];
            }
        }
    }
    dx
}
