//! Mask and flow rendering, and segmentation scoring against the
//! environment's ground truth.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::rollout::{derive_seed, sample_action};
use crate::agent::ActorCritic;
use crate::env::{pairs_to_activation, EnvConfig, FramePair, SpriteWorld, FRAME_SIDE};
use crate::error::{Error, Result};
use crate::motion::{compose_flow, FlowField};
use crate::segnet::{SegNet, SegOutput};
use crate::tensor::Scalar;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
/// White columns between the panels of an exported triptych.
pub const SEPARATOR_PX: usize = 2;

/// `Σ_ij M⁽ᵏ⁾_ij · ‖t_k‖₁` for every mask of sample `i`.
pub fn saliencies<T: Scalar>(out: &SegOutput<T>, i: usize) -> Vec<f64> {
    let k = out.k();
    let hw = out.masks.h * out.masks.w;
    let masks = out.sample_masks(i);
    let t = out.sample_translations(i);
    (0..k)
        .map(|m| {
            let area: f64 = masks[m * hw..(m + 1) * hw].iter().map(|v| v.as_f64()).sum();
            area * (t[2 * m].as_f64().abs() + t[2 * m + 1].as_f64().abs())
        })
        .collect()
}

/// Index of the largest saliency; the lowest index wins ties.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = k;
        }
    }
    best
}

pub fn most_salient_mask<T: Scalar>(out: &SegOutput<T>, i: usize) -> usize {
    argmax_first(&saliencies(out, i))
}

/// RGB image, row-major, channels in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbFrame {
    pub h: usize,
    pub w: usize,
    pub data: Vec<[f32; 3]>,
}

impl RgbFrame {
    pub fn to_image(&self) -> RgbImage {
        let mut img = RgbImage::new(self.w as u32, self.h as u32);
        for (p, px) in img.pixels_mut().zip(&self.data) {
            p.0 = px.map(to_u8);
        }
        img
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel confidence `Σ_k M⁽ᵏ⁾·‖t_k‖₁`, normalized by its image maximum.
pub fn confidence_map<T: Scalar>(out: &SegOutput<T>, i: usize) -> Vec<f64> {
    let k = out.k();
    let hw = out.masks.h * out.masks.w;
    let masks = out.sample_masks(i);
    let t = out.sample_translations(i);
    let mut conf = vec![0.0; hw];
    for m in 0..k {
        let w = t[2 * m].as_f64().abs() + t[2 * m + 1].as_f64().abs();
        if w == 0.0 {
            continue;
        }
        for (c, v) in conf.iter_mut().zip(&masks[m * hw..(m + 1) * hw]) {
            *c += v.as_f64() * w;
        }
    }
    let max = conf.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        conf.iter_mut().for_each(|c| *c = (*c / max).clamp(0.0, 1.0));
    }
    conf
}

/// Grayscale `frame` with the translation-weighted mask confidence blended
/// in as green.
pub fn weighted_mask_overlay<T: Scalar>(frame: &[f32], out: &SegOutput<T>, i: usize) -> RgbFrame {
    let conf = confidence_map(out, i);
    let data = frame
        .iter()
        .zip(&conf)
        .map(|(&g, &c)| {
            let c = c as f32;
            let base = g * (1.0 - c);
            [base, base + c, base]
        })
        .collect();
    RgbFrame {
        h: out.masks.h,
        w: out.masks.w,
        data,
    }
}

/// Hue from direction, value from magnitude over the image maximum,
/// full saturation.
pub fn flow_to_color<T: Scalar>(flow: &FlowField<T>) -> RgbFrame {
    let (dx, dy) = (flow.dx(), flow.dy());
    let mags: Vec<f64> = dx.iter().zip(dy).map(|(x, y)| x.as_f64().hypot(y.as_f64())).collect();
    let max = mags.iter().copied().fold(0.0, f64::max);
    let data = dx
        .iter()
        .zip(dy)
        .zip(&mags)
        .map(|((x, y), &m)| {
            let v = if max > 0.0 { m / max } else { 0.0 };
            hsv_to_rgb(flow_hue(x.as_f64(), y.as_f64()), 1.0, v).map(|c| c as f32)
        })
        .collect();
    RgbFrame {
        h: flow.h,
        w: flow.w,
        data,
    }
}

/// Direction of `(dx, dy)` in degrees, in `[0, 360)`.
pub fn flow_hue(dx: f64, dy: f64) -> f64 {
    dy.atan2(dx).to_degrees().rem_euclid(360.0)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// `|a ∩ b| / |a ∪ b|`; 0 when both are empty.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Best IoU of `pred` against any of `truth`.
pub fn best_match_iou(pred: &[bool], truth: &[Vec<bool>]) -> f64 {
    truth.iter().map(|t| iou(pred, t)).fold(0.0, f64::max)
}

pub fn binarize<T: Scalar>(mask: &[T], threshold: f64) -> Vec<bool> {
    mask.iter().map(|v| v.as_f64() >= threshold).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouRow {
    pub frame: usize,
    pub salient: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    pub rows: Vec<IouRow>,
    pub mean: f64,
}

impl IouReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// A frame pair with the ground-truth masks of its older frame, which is
/// the frame the predicted masks are laid over.
pub struct LabelledPair {
    pub pair: FramePair,
    pub truth: Vec<Vec<bool>>,
}

/// Plays `n_frames` uniform-random steps from `seed` and labels each
/// observed pair. Episodes that end are restarted with the next seed.
pub fn labelled_pairs(env: &EnvConfig, n_frames: usize, seed: u64) -> Result<Vec<LabelledPair>> {
    let mut world = SpriteWorld::new(env.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, 0));
    let mut episode = 0;
    world.reset(derive_seed(seed, 0, episode));
    let mut out = Vec::with_capacity(n_frames);
    while out.len() < n_frames {
        let t = world.step(rng.random_range(0..world.num_actions()))?;
        out.push(LabelledPair {
            pair: t.obs,
            truth: world.ground_truth_previous()?.masks,
        });
        if t.done {
            episode += 1;
            world.reset(derive_seed(seed, 0, episode));
        }
    }
    Ok(out)
}

/// Binarized most-salient mask against the best-matching sprite mask.
pub fn evaluate_iou(net: &SegNet<f32>, env: &EnvConfig, n_frames: usize, seed: u64, threshold: f64) -> Result<IouReport> {
    let data = labelled_pairs(env, n_frames, seed)?;
    let hw = FRAME_SIDE * FRAME_SIDE;
    let mut rows = Vec::with_capacity(n_frames);
    for (c, chunk) in data.chunks(16).enumerate() {
        let pairs: Vec<FramePair> = chunk.iter().map(|l| l.pair.clone()).collect();
        let out = net.forward(&pairs_to_activation::<f32>(&pairs))?;
        for (i, l) in chunk.iter().enumerate() {
            let k = most_salient_mask(&out, i);
            let pred = binarize(&out.sample_masks(i)[k * hw..(k + 1) * hw], threshold);
            rows.push(IouRow {
                frame: c * 16 + i,
                salient: k,
                iou: best_match_iou(&pred, &l.truth),
            });
        }
    }
    let mean = rows.iter().map(|r| r.iou).sum::<f64>() / rows.len().max(1) as f64;
    Ok(IouReport { rows, mean })
}

/// Frame, overlay and flow side by side with white separators.
pub fn triptych(frame: &[f32], overlay: &RgbFrame, flow: &RgbFrame) -> RgbImage {
    let (h, w) = (overlay.h, overlay.w);
    let total_w = 3 * w + 2 * SEPARATOR_PX;
    let mut img = RgbImage::from_pixel(total_w as u32, h as u32, image::Rgb([255, 255, 255]));
    for r in 0..h {
        for c in 0..w {
            let g = to_u8(frame[r * w + c]);
            img.put_pixel(c as u32, r as u32, image::Rgb([g, g, g]));
            img.put_pixel((w + SEPARATOR_PX + c) as u32, r as u32, image::Rgb(overlay.data[r * w + c].map(to_u8)));
            img.put_pixel((2 * (w + SEPARATOR_PX) + c) as u32, r as u32, image::Rgb(flow.data[r * w + c].map(to_u8)));
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub step: usize,
    pub files: Vec<String>,
    pub salient: usize,
    pub iou: f64,
    pub mean_iou: f64,
}

/// Who picks actions during an exported episode.
pub enum ActionSource<'a> {
    Random,
    Policy(&'a ActorCritic<f32>),
}

/// Plays one episode of `steps` steps and writes `step_NNNNN.png`
/// triptychs plus `manifest.jsonl` into `dir`.
pub fn export_episode(
    net: &SegNet<f32>,
    env: &EnvConfig,
    actions: ActionSource<'_>,
    seed: u64,
    steps: usize,
    dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut world = SpriteWorld::new(env.clone())?;
    world.reset(derive_seed(seed, 0, 0));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, 0));
    let hw = FRAME_SIDE * FRAME_SIDE;
    let mut entries = Vec::with_capacity(steps);
    for step in 0..steps {
        let a = match &actions {
            ActionSource::Random => rng.random_range(0..world.num_actions()),
            ActionSource::Policy(agent) => {
                let out = agent.act(&pairs_to_activation::<f32>(&[world.observation()?]))?;
                sample_action(out.row(0), &mut rng)
            }
        };
        let t = world.step(a)?;
        let truth = world.ground_truth_previous()?.masks;
        let out = net.forward(&pairs_to_activation::<f32>(std::slice::from_ref(&t.obs)))?;
        let k = most_salient_mask(&out, 0);
        let pred = binarize(&out.sample_masks(0)[k * hw..(k + 1) * hw], DEFAULT_IOU_THRESHOLD);
        let flow = compose_flow(out.sample_masks(0), out.k(), FRAME_SIDE, FRAME_SIDE, out.sample_translations(0), out.sample_camera(0))?;
        let frame = &t.obs.prev.pixels;
        let img = triptych(frame, &weighted_mask_overlay(frame, &out, 0), &flow_to_color(&flow));
        let name = format!("step_{step:05}.png");
        let path: PathBuf = dir.join(&name);
        img.save(&path).map_err(|e| Error::io(format!("writing {}", path.display()), std::io::Error::other(e)))?;
        entries.push(ManifestEntry {
            step,
            files: vec![name],
            salient: k,
            iou: best_match_iou(&pred, &truth),
            mean_iou: 0.0,
        });
        if t.done {
            break;
        }
    }
    let mean = entries.iter().map(|e| e.iou).sum::<f64>() / entries.len().max(1) as f64;
    let mut text = Vec::new();
    for e in &mut entries {
        e.mean_iou = mean;
        serde_json::to_writer(&mut text, e)?;
        text.push(b'\n');
    }
    let path = dir.join("manifest.jsonl");
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(&text))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(entries)
}
