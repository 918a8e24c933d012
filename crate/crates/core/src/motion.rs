//! Differentiable motion operations: flow composition from masks and
//! translations, backward bilinear warping, DSSIM, the mask·translation L1
//! penalty, the regularization curriculum and the combined segmentation loss.
//!
//! Images are single-channel `h×w` row-major slices. Flow is stored as two
//! planes, `dx` (towards increasing column) then `dy` (towards increasing row).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::segnet::{SegOutput, SegOutputGrad};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T> {
    pub h: usize,
    pub w: usize,
    /// `[dx plane | dy plane]`, each `h×w`.
    pub data: Vec<T>,
}

impl<T: Scalar> FlowField<T> {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![T::zero(); 2 * h * w],
        }
    }

    pub fn uniform(h: usize, w: usize, dx: T, dy: T) -> Self {
        let mut data = vec![dx; h * w];
        data.extend(std::iter::repeat_n(dy, h * w));
        Self { h, w, data }
    }

    pub fn dx(&self) -> &[T] {
        &self.data[..self.h * self.w]
    }

    pub fn dy(&self) -> &[T] {
        &self.data[self.h * self.w..]
    }

    pub fn at(&self, i: usize, j: usize) -> (T, T) {
        let p = i * self.w + j;
        (self.data[p], self.data[self.h * self.w + p])
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: expected {want} values, got {got}")));
    }
    Ok(())
}

/// `F_ij = Σ_k M⁽ᵏ⁾_ij · t_k + c`.
///
/// `masks` is `k×h×w`, `translations` is `k×2`.
pub fn compose_flow<T: Scalar>(
    masks: &[T],
    k: usize,
    h: usize,
    w: usize,
    translations: &[T],
    camera: [T; 2],
) -> Result<FlowField<T>> {
    check_len("masks", masks.len(), k * h * w)?;
    check_len("translations", translations.len(), 2 * k)?;
    let hw = h * w;
    let mut flow = FlowField::uniform(h, w, camera[0], camera[1]);
    let (fx, fy) = flow.data.split_at_mut(hw);
    for (m, t) in masks.chunks_exact(hw).zip(translations.chunks_exact(2)) {
        let (tx, ty) = (t[0], t[1]);
        for ((x, y), &mv) in fx.iter_mut().zip(fy.iter_mut()).zip(m) {
            *x += mv * tx;
            *y += mv * ty;
        }
    }
    Ok(flow)
}

/// Gradients of [`compose_flow`]: (d masks, d translations, d camera).
pub fn compose_flow_backward<T: Scalar>(
    masks: &[T],
    translations: &[T],
    d_flow: &FlowField<T>,
) -> (Vec<T>, Vec<T>, [T; 2]) {
    let hw = d_flow.h * d_flow.w;
    let (gx, gy) = (d_flow.dx(), d_flow.dy());
    let mut d_masks = vec![T::zero(); masks.len()];
    let mut d_t = vec![T::zero(); translations.len()];
    for ((m, dm), (t, dt)) in masks
        .chunks_exact(hw)
        .zip(d_masks.chunks_exact_mut(hw))
        .zip(translations.chunks_exact(2).zip(d_t.chunks_exact_mut(2)))
    {
        let (mut sx, mut sy) = (T::zero(), T::zero());
        for p in 0..hw {
            dm[p] = gx[p] * t[0] + gy[p] * t[1];
            sx += m[p] * gx[p];
            sy += m[p] * gy[p];
        }
        dt[0] = sx;
        dt[1] = sy;
    }
    let d_cam = [gx.iter().copied().sum(), gy.iter().copied().sum()];
    (d_masks, d_t, d_cam)
}

struct Sample<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    clamped_x: bool,
    clamped_y: bool,
}

#[inline]
fn axis<T: Scalar>(raw: T, len: usize) -> (usize, usize, T, bool) {
    let hi = T::lit((len - 1) as f64);
    let clamped = raw < T::zero() || raw > hi;
    let c = raw.max(T::zero()).min(hi);
    if len == 1 {
        return (0, 0, T::zero(), clamped);
    }
    let lo = c.floor().to_usize().unwrap_or(0).min(len - 2);
    (lo, lo + 1, c - T::lit(lo as f64), clamped)
}

#[inline]
fn sample_point<T: Scalar>(i: usize, j: usize, h: usize, w: usize, dx: T, dy: T) -> Sample<T> {
    let (x0, x1, fx, clamped_x) = axis(T::lit(j as f64) + dx, w);
    let (y0, y1, fy, clamped_y) = axis(T::lit(i as f64) + dy, h);
    Sample {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        clamped_x,
        clamped_y,
    }
}

fn check_flow<T: Scalar>(src_len: usize, flow: &FlowField<T>) -> Result<()> {
    check_len("warp source", src_len, flow.h * flow.w)?;
    if flow.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("flow field contains non-finite values".into()));
    }
    Ok(())
}

/// Backward warp: `out(p) = bilinear(src, clamp(p + F(p)))`.
pub fn warp<T: Scalar>(src: &[T], flow: &FlowField<T>) -> Result<Vec<T>> {
    check_flow(src.len(), flow)?;
    let (h, w) = (flow.h, flow.w);
    let mut out = vec![T::zero(); h * w];
    for i in 0..h {
        for j in 0..w {
            let (dx, dy) = flow.at(i, j);
            let s = sample_point(i, j, h, w, dx, dy);
            let (a, b) = (src[s.y0 * w + s.x0], src[s.y0 * w + s.x1]);
            let (c, d) = (src[s.y1 * w + s.x0], src[s.y1 * w + s.x1]);
            let (gx, gy) = (T::one() - s.fx, T::one() - s.fy);
            out[i * w + j] = gy * (gx * a + s.fx * b) + s.fy * (gx * c + s.fx * d);
        }
    }
    Ok(out)
}

/// Gradients of [`warp`]: (d source, d flow). Coordinates that were clamped
/// get zero flow gradient along the clamped axis.
pub fn warp_backward<T: Scalar>(src: &[T], flow: &FlowField<T>, d_out: &[T]) -> Result<(Vec<T>, FlowField<T>)> {
    check_flow(src.len(), flow)?;
    let (h, w) = (flow.h, flow.w);
    check_len("warp output gradient", d_out.len(), h * w)?;
    let mut d_src = vec![T::zero(); h * w];
    let mut d_flow = FlowField::zeros(h, w);
    let hw = h * w;
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let g = d_out[p];
            if g == T::zero() {
                continue;
            }
            let (dx, dy) = flow.at(i, j);
            let s = sample_point(i, j, h, w, dx, dy);
            let (ia, ib, ic, id) = (s.y0 * w + s.x0, s.y0 * w + s.x1, s.y1 * w + s.x0, s.y1 * w + s.x1);
            let (gx, gy) = (T::one() - s.fx, T::one() - s.fy);
            d_src[ia] += g * gx * gy;
            d_src[ib] += g * s.fx * gy;
            d_src[ic] += g * gx * s.fy;
            d_src[id] += g * s.fx * s.fy;
            let (a, b, c, d) = (src[ia], src[ib], src[ic], src[id]);
            if !s.clamped_x && w > 1 {
                d_flow.data[p] = g * (gy * (b - a) + s.fy * (d - c));
            }
            if !s.clamped_y && h > 1 {
                d_flow.data[hw + p] = g * (gx * (c - a) + s.fx * (d - b));
            }
        }
    }
    Ok((d_src, d_flow))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_taps<T: Scalar>() -> [T; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    let mut out = [T::zero(); SSIM_WINDOW];
    for (o, v) in out.iter_mut().zip(raw) {
        *o = T::lit(v / s);
    }
    out
}

/// Valid-mode separable Gaussian filter: `h×w` → `(h-10)×(w-10)`.
fn blur_valid<T: Scalar>(img: &[T], h: usize, w: usize, g: &[T; SSIM_WINDOW]) -> Vec<T> {
    let (hv, wv) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![T::zero(); h * wv];
    for i in 0..h {
        let row = &img[i * w..(i + 1) * w];
        for j in 0..wv {
            tmp[i * wv + j] = row[j..j + SSIM_WINDOW].iter().zip(g).map(|(&a, &b)| a * b).sum();
        }
    }
    let mut out = vec![T::zero(); hv * wv];
    for i in 0..hv {
        for (t, &gt) in g.iter().enumerate() {
            let src = &tmp[(i + t) * wv..(i + t + 1) * wv];
            for (o, &s) in out[i * wv..(i + 1) * wv].iter_mut().zip(src) {
                *o += gt * s;
            }
        }
    }
    out
}

/// Adjoint of [`blur_valid`].
fn blur_valid_adjoint<T: Scalar>(m: &[T], h: usize, w: usize, g: &[T; SSIM_WINDOW]) -> Vec<T> {
    let (hv, wv) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![T::zero(); h * wv];
    for i in 0..hv {
        for (t, &gt) in g.iter().enumerate() {
            let dst = &mut tmp[(i + t) * wv..(i + t + 1) * wv];
            for (d, &s) in dst.iter_mut().zip(&m[i * wv..(i + 1) * wv]) {
                *d += gt * s;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for i in 0..h {
        let row = &mut out[i * w..(i + 1) * w];
        for j in 0..wv {
            let v = tmp[i * wv + j];
            for (o, &gt) in row[j..j + SSIM_WINDOW].iter_mut().zip(g) {
                *o += gt * v;
            }
        }
    }
    out
}

fn check_images<T>(a: &[T], b: &[T], h: usize, w: usize) -> Result<()> {
    check_len("dssim first image", a.len(), h * w)?;
    check_len("dssim second image", b.len(), h * w)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "dssim needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    Ok(())
}

/// Structural dissimilarity `(1 − mean SSIM) / 2` over fully interior 11×11
/// Gaussian windows (σ = 1.5, dynamic range 1).
pub fn dssim<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize) -> Result<T> {
    Ok(dssim_impl(a, b, h, w, false)?.0)
}

/// DSSIM and its gradients w.r.t. both images.
pub fn dssim_with_grad<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize) -> Result<(T, Vec<T>, Vec<T>)> {
    let (v, g) = dssim_impl(a, b, h, w, true)?;
    let (da, db) = g.unwrap();
    Ok((v, da, db))
}

#[allow(clippy::type_complexity)]
fn dssim_impl<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize, grad: bool) -> Result<(T, Option<(Vec<T>, Vec<T>)>)> {
    check_images(a, b, h, w)?;
    let g = gaussian_taps::<T>();
    let sq = |x: &[T], y: &[T]| x.iter().zip(y).map(|(&p, &q)| p * q).collect::<Vec<T>>();
    let mu_a = blur_valid(a, h, w, &g);
    let mu_b = blur_valid(b, h, w, &g);
    let e_aa = blur_valid(&sq(a, a), h, w, &g);
    let e_bb = blur_valid(&sq(b, b), h, w, &g);
    let e_ab = blur_valid(&sq(a, b), h, w, &g);
    let (c1, c2) = (T::lit(SSIM_C1), T::lit(SSIM_C2));
    let two = T::lit(2.0);
    let nv = mu_a.len();
    let mut total = T::zero();
    let mut partials = grad.then(|| vec![[T::zero(); 5]; nv]);
    for p in 0..nv {
        let (ma, mb) = (mu_a[p], mu_b[p]);
        let a1 = two * ma * mb + c1;
        let a2 = two * (e_ab[p] - ma * mb) + c2;
        let b1 = ma * ma + mb * mb + c1;
        let b2 = (e_aa[p] - ma * ma) + (e_bb[p] - mb * mb) + c2;
        let den = b1 * b2;
        let s = a1 * a2 / den;
        total += s;
        if let Some(parts) = partials.as_mut() {
            // ∂S/∂(μa, μb, E[a²], E[b²], E[ab])
            let d_mu_a = (two * mb * (a2 - a1)) / den - s * (two * ma * (b2 - b1)) / den;
            let d_mu_b = (two * ma * (a2 - a1)) / den - s * (two * mb * (b2 - b1)) / den;
            let d_eaa = -s / b2;
            let d_eab = two * a1 / den;
            parts[p] = [d_mu_a, d_mu_b, d_eaa, d_eaa, d_eab];
        }
    }
    let n = T::lit(nv as f64);
    let value = (T::one() - total / n) / two;
    let grads = partials.map(|parts| {
        let scale = -T::one() / (two * n);
        let plane = |idx: usize| -> Vec<T> {
            let m: Vec<T> = parts.iter().map(|q| q[idx] * scale).collect();
            blur_valid_adjoint(&m, h, w, &g)
        };
        let (g_mu_a, g_mu_b, g_eaa, g_ebb, g_eab) = (plane(0), plane(1), plane(2), plane(3), plane(4));
        let da = (0..h * w).map(|p| g_mu_a[p] + two * a[p] * g_eaa[p] + b[p] * g_eab[p]).collect();
        let db = (0..h * w).map(|p| g_mu_b[p] + two * b[p] * g_ebb[p] + a[p] * g_eab[p]).collect();
        (da, db)
    });
    Ok((value, grads))
}

/// `Σ_k Σ_ij M⁽ᵏ⁾_ij · (|t_k,x| + |t_k,y|)`, computed as `Σ_k (Σ M⁽ᵏ⁾)·‖t_k‖₁`.
/// The camera translation is not penalized.
pub fn reg_loss<T: Scalar>(masks: &[T], k: usize, h: usize, w: usize, translations: &[T]) -> Result<T> {
    check_len("masks", masks.len(), k * h * w)?;
    check_len("translations", translations.len(), 2 * k)?;
    Ok(masks
        .chunks_exact(h * w)
        .zip(translations.chunks_exact(2))
        .map(|(m, t)| m.iter().copied().sum::<T>() * (t[0].abs() + t[1].abs()))
        .sum())
}

/// Elementwise L1 of the `k×h×w×2` field `M⁽ᵏ⁾ × t_k`; same value as
/// [`reg_loss`], kept as the reference form.
pub fn reg_loss_direct<T: Scalar>(masks: &[T], k: usize, h: usize, w: usize, translations: &[T]) -> Result<T> {
    check_len("masks", masks.len(), k * h * w)?;
    check_len("translations", translations.len(), 2 * k)?;
    let mut s = T::zero();
    for (m, t) in masks.chunks_exact(h * w).zip(translations.chunks_exact(2)) {
        for &v in m {
            s += (v * t[0]).abs() + (v * t[1]).abs();
        }
    }
    Ok(s)
}

/// Gradients of [`reg_loss`] for non-negative masks: (d masks, d translations).
/// `sign(0)` is taken as 0.
pub fn reg_loss_backward<T: Scalar>(masks: &[T], h: usize, w: usize, translations: &[T]) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let mut dm = vec![T::zero(); masks.len()];
    let mut dt = vec![T::zero(); translations.len()];
    let sgn = |v: T| if v > T::zero() { T::one() } else if v < T::zero() { -T::one() } else { T::zero() };
    for ((m, dmk), (t, dtk)) in masks
        .chunks_exact(hw)
        .zip(dm.chunks_exact_mut(hw))
        .zip(translations.chunks_exact(2).zip(dt.chunks_exact_mut(2)))
    {
        let l1 = t[0].abs() + t[1].abs();
        dmk.iter_mut().for_each(|v| *v = l1);
        let msum: T = m.iter().copied().sum();
        dtk[0] = sgn(t[0]) * msum;
        dtk[1] = sgn(t[1]) * msum;
    }
    (dm, dt)
}

/// Linear warm-up of the regularization weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub warmup_steps: u64,
}

impl CurriculumSchedule {
    pub fn new(warmup_steps: u64) -> Result<Self> {
        if warmup_steps < 1 {
            return Err(Error::config("warmup_steps", "must be at least 1"));
        }
        Ok(Self { warmup_steps })
    }

    /// Keeps the 100k-of-250k warm-up ratio for a shorter run.
    pub fn scaled(total_steps: u64) -> Self {
        Self {
            warmup_steps: ((total_steps as f64 * 0.4).round() as u64).max(1),
        }
    }
}

/// `min(step / warmup_steps, 1)`.
pub fn lambda_schedule(step: u64, schedule: &CurriculumSchedule) -> f64 {
    (step as f64 / schedule.warmup_steps.max(1) as f64).min(1.0)
}

/// How the summed mask·translation penalty is scaled before it enters the
/// segmentation loss. DSSIM is a per-pixel mean, so the raw sum would swamp
/// it by a factor of `h·w`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegNormalization {
    /// Raw sum over pixels and masks.
    Sum,
    /// Sum divided by `h·w`.
    #[default]
    PixelMean,
    /// Mean over every entry of the `K×2×h×w` product tensor.
    ElementMean,
}

impl RegNormalization {
    pub fn divisor(self, k: usize, h: usize, w: usize) -> f64 {
        match self {
            RegNormalization::Sum => 1.0,
            RegNormalization::PixelMean => (h * w) as f64,
            RegNormalization::ElementMean => (2 * k * h * w) as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub regularization: f64,
    pub lambda_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(reconstruction: f64, regularization: f64, lambda_reg: f64) -> Self {
        Self {
            reconstruction,
            regularization,
            lambda_reg,
            total: reconstruction + lambda_reg * regularization,
        }
    }
}

/// Segmentation loss over a batch: DSSIM between each older frame and the
/// newer frame warped back by the composed flow, plus `λ`-weighted flow
/// regularization. Both terms are averaged over the batch.
///
/// `pairs` is `n×2×h×w` (older frame first). Returns the loss and its
/// gradient w.r.t. the network outputs, already scaled by `weight`.
pub fn seg_loss<T: Scalar>(
    pairs: &Activation<T>,
    out: &SegOutput<T>,
    lambda_reg: f64,
    norm: RegNormalization,
    weight: f64,
) -> Result<(LossBreakdown, SegOutputGrad<T>)> {
    let (n, h, w, k) = (pairs.n, pairs.h, pairs.w, out.k());
    if pairs.c != 2 || out.batch() != n || out.masks.h != h || out.masks.w != w {
        return Err(Error::Shape("segmentation loss: frame pairs and outputs disagree".into()));
    }
    let hw = h * w;
    let inv_n = 1.0 / n as f64;
    let reg_scale = 1.0 / norm.divisor(k, h, w);
    let mut recon = 0.0;
    let mut reg = 0.0;
    let mut grad = SegOutputGrad {
        masks: Activation::zeros(n, k, h, w),
        object_translations: vec![T::zero(); n * k * 2],
        camera_translation: vec![T::zero(); n * 2],
    };
    let rec_w = T::lit(weight * inv_n);
    let reg_w = T::lit(weight * inv_n * lambda_reg * reg_scale);
    for i in 0..n {
        let pair = pairs.sample(i);
        let (x0, x1) = (&pair[..hw], &pair[hw..]);
        let masks = out.sample_masks(i);
        let t = out.sample_translations(i);
        let flow = compose_flow(masks, k, h, w, t, out.sample_camera(i))?;
        let recon_frame = warp(x1, &flow)?;
        let (d, _, d_recon) = dssim_with_grad(x0, &recon_frame, h, w)?;
        recon += d.as_f64() * inv_n;
        let r = reg_loss(masks, k, h, w, t)?;
        reg += r.as_f64() * reg_scale * inv_n;

        let d_recon: Vec<T> = d_recon.into_iter().map(|v| v * rec_w).collect();
        let (_, d_flow) = warp_backward(x1, &flow, &d_recon)?;
        let (dm_flow, dt_flow, dc) = compose_flow_backward(masks, t, &d_flow);
        let gm = grad.masks.sample_mut(i);
        for (g, v) in gm.iter_mut().zip(dm_flow) {
            *g += v;
        }
        let gt = &mut grad.object_translations[i * 2 * k..(i + 1) * 2 * k];
        for (g, v) in gt.iter_mut().zip(dt_flow) {
            *g += v;
        }
        grad.camera_translation[2 * i] += dc[0];
        grad.camera_translation[2 * i + 1] += dc[1];
        if lambda_reg != 0.0 {
            let (dm_reg, dt_reg) = reg_loss_backward(masks, h, w, t);
            for (g, v) in grad.masks.sample_mut(i).iter_mut().zip(dm_reg) {
                *g += v * reg_w;
            }
            for (g, v) in grad.object_translations[i * 2 * k..(i + 1) * 2 * k].iter_mut().zip(dt_reg) {
                *g += v * reg_w;
            }
        }
    }
    Ok((LossBreakdown::new(recon, reg, lambda_reg), grad))
}

/// Mean per-pixel absolute difference, the reconstruction loss DSSIM replaces.
/// Returned with its gradient w.r.t. `b`; `sign(0)` is 0.
pub fn l1_with_grad<T: Scalar>(a: &[T], b: &[T]) -> (T, Vec<T>) {
    let n = T::lit(a.len() as f64);
    let v = a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum::<T>() / n;
    let g = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            if y > x {
                T::one() / n
            } else if y < x {
                -T::one() / n
            } else {
                T::zero()
            }
        })
        .collect();
    (v, g)
}
