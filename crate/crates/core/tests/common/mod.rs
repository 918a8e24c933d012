//! Independent reference implementations and fixtures shared by the
//! integration tests. Oracles are written as plain loops on purpose and do
//! not call into the library code they check.

#![allow(dead_code)]

use morel_core::agent::{compute_advantages, objective, ActorCritic, AgentConfig, Architecture, Body, PolicyLoss, RolloutBatch, UpdateConfig};
use morel_core::motion::{dssim_with_grad, l1_with_grad, seg_loss, warp, warp_backward, RegNormalization};
use morel_core::nn::{Activation, Parameterized};
use morel_core::segtrain::{SegCheckpointConfig, SEGNET_KIND};
use morel_core::{
    Checkpoint, EnvConfig, FlowField, FramePair, PretrainConfig, Scalar, SegNet, SegNetConfig, SegOutput, SpriteWorld,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Flow as two planes (dx, dy), built pixel by pixel.
pub fn oracle_compose_flow(
    masks: &[f64],
    k: usize,
    h: usize,
    w: usize,
    t: &[f64],
    camera: [f64; 2],
) -> (Vec<f64>, Vec<f64>) {
    let mut fx = vec![0.0; h * w];
    let mut fy = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut sx = camera[0];
            let mut sy = camera[1];
            for m in 0..k {
                let v = masks[m * h * w + i * w + j];
                sx += v * t[2 * m];
                sy += v * t[2 * m + 1];
            }
            fx[i * w + j] = sx;
            fy[i * w + j] = sy;
        }
    }
    (fx, fy)
}

/// Elementwise L1 norm of every mask-translation product field.
pub fn oracle_reg_loss(masks: &[f64], k: usize, h: usize, w: usize, t: &[f64]) -> f64 {
    let mut s = 0.0;
    for m in 0..k {
        for i in 0..h {
            for j in 0..w {
                let v = masks[m * h * w + i * w + j];
                s += (v * t[2 * m]).abs();
                s += (v * t[2 * m + 1]).abs();
            }
        }
    }
    s
}

/// Returns by summing discounted rewards forward from each step until the
/// first episode end, bootstrapping only when no end was met.
pub fn oracle_returns(
    rewards: &[f64],
    dones: &[bool],
    bootstrap: &[f64],
    n_steps: usize,
    num_envs: usize,
    gamma: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; n_steps * num_envs];
    for e in 0..num_envs {
        for t in 0..n_steps {
            let mut total = 0.0;
            let mut discount = 1.0;
            let mut ended = false;
            for l in t..n_steps {
                let i = l * num_envs + e;
                total += discount * rewards[i];
                discount *= gamma;
                if dones[i] {
                    ended = true;
                    break;
                }
            }
            if !ended {
                total += discount * bootstrap[e];
            }
            out[t * num_envs + e] = total;
        }
    }
    out
}

/// First index maximizing the L1 norm of the mask-translation product.
pub fn oracle_most_salient(masks: &[f64], k: usize, hw: usize, t: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for m in 0..k {
        let mut v = 0.0;
        for p in 0..hw {
            v += (masks[m * hw + p] * t[2 * m]).abs() + (masks[m * hw + p] * t[2 * m + 1]).abs();
        }
        if v > best_v {
            best_v = v;
            best = m;
        }
    }
    best
}

/// Bilinear sample of `src` at column `x`, row `y`, coordinates clamped to
/// the image.
pub fn oracle_bilinear(src: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (x - x0 as f64, y - y0 as f64);
    let top = src[y0 * w + x0] * (1.0 - ax) + src[y0 * w + x1] * ax;
    let bottom = src[y1 * w + x0] * (1.0 - ax) + src[y1 * w + x1] * ax;
    top * (1.0 - ay) + bottom * ay
}

/// Random network outputs for `n` samples of `k` masks at `h×w`.
pub fn random_output(rng: &mut ChaCha8Rng, n: usize, k: usize, h: usize, w: usize, t_scale: f64) -> SegOutput<f64> {
    SegOutput {
        masks: Activation::from_vec(n, k, h, w, uniform(rng, n * k * h * w, 0.02, 0.98)).unwrap(),
        object_translations: uniform(rng, n * k * 2, -t_scale, t_scale),
        camera_translation: uniform(rng, n * 2, -t_scale / 4.0, t_scale / 4.0),
        embedding: Vec::new(),
    }
}

/// Smooth random frame pairs: a few soft blobs moved by a small offset.
pub fn blob_pairs(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Activation<f64> {
    let mut data = Vec::with_capacity(n * 2 * h * w);
    for _ in 0..n {
        let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(2.0..(w as f64 - 2.0)),
                    rng.random_range(2.0..(h as f64 - 2.0)),
                    rng.random_range(1.5..3.5),
                    rng.random_range(0.3..1.0),
                )
            })
            .collect();
        let (ox, oy) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
        for (sx, sy) in [(0.0, 0.0), (ox, oy)] {
            for i in 0..h {
                for j in 0..w {
                    let mut v: f64 = 0.05;
                    for &(cx, cy, r, a) in &blobs {
                        let d2 = (j as f64 - cx - sx).powi(2) + (i as f64 - cy - sy).powi(2);
                        v += a * (-d2 / (2.0 * r * r)).exp();
                    }
                    data.push(v.min(1.0));
                }
            }
        }
    }
    Activation::from_vec(n, 2, h, w, data).unwrap()
}

pub fn small_agent(arch: Architecture, seed: u64) -> ActorCritic<f64> {
    ActorCritic::new(
        AgentConfig {
            architecture: arch,
            segnet: SegNetConfig { k: 3, frame_size: 36 },
            num_actions: 5,
        },
        seed,
    )
    .unwrap()
}

/// A rollout whose behaviour statistics come from `agent` itself, so first
/// ratios are exactly 1.
pub fn rollout_for(agent: &ActorCritic<f64>, n_steps: usize, num_envs: usize, seed: u64) -> RolloutBatch<f64> {
    let mut r = rng(seed);
    let n = n_steps * num_envs;
    let s = agent.config.segnet.frame_size;
    let obs = blob_pairs(&mut r, n, s, s);
    let out = agent.act(&obs).unwrap();
    let actions: Vec<usize> = (0..n).map(|_| r.random_range(0..agent.num_actions())).collect();
    RolloutBatch {
        n_steps,
        num_envs,
        log_probs: actions.iter().enumerate().map(|(i, &a)| out.row(i)[a].ln()).collect(),
        values: out.values.clone(),
        actions,
        rewards: (0..n).map(|_| r.random_range(-1..=1) as f64).collect(),
        dones: (0..n).map(|_| r.random_bool(0.25)).collect(),
        bootstrap_values: uniform(&mut r, num_envs, -1.0, 1.0),
        obs,
    }
}

pub fn flat_params<P: Parameterized<f64>>(p: &P) -> Vec<f64> {
    let mut v = Vec::new();
    p.visit("", &mut |_, t| v.extend_from_slice(t.data()));
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub const FD_STEP: f64 = 1e-6;

/// Smaller step for network parameters: conv biases move many ReLU
/// pre-activations at once, and a wider step crosses kinks.
pub const FD_STEP_PARAMS: f64 = 1e-7;

/// Central differences of `loss` at `coords` (tensor index, element index)
/// of `model`'s parameters.
pub fn fd_params<P, F>(model: &P, coords: &[(usize, usize)], loss: F) -> Vec<f64>
where
    P: Parameterized<f64> + Clone,
    F: Fn(&P) -> f64,
{
    coords
        .iter()
        .map(|&(ti, ei)| {
            let mut plus = model.clone();
            plus.tensors_mut()[ti].data_mut()[ei] += FD_STEP_PARAMS;
            let mut minus = model.clone();
            minus.tensors_mut()[ti].data_mut()[ei] -= FD_STEP_PARAMS;
            (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP_PARAMS)
        })
        .collect()
}

/// Coordinates to probe per tensor: the largest-gradient entry plus
/// `per_tensor − 1` random ones.
pub fn probe_coords<P: Parameterized<f64>>(grad: &P, per_tensor: usize, seed: u64) -> Vec<Vec<(usize, usize)>> {
    let mut r = rng(seed);
    grad.named_tensors()
        .iter()
        .enumerate()
        .map(|(ti, (_, t))| {
            let d = t.data();
            let top = (0..d.len()).max_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs())).unwrap_or(0);
            let mut c = vec![(ti, top)];
            c.extend((1..per_tensor.min(d.len())).map(|_| (ti, r.random_range(0..d.len()))));
            c
        })
        .collect()
}

/// Worst per-tensor relative error between analytic and numeric gradients
/// over the probed coordinates, with the tensor name.
pub fn worst_param_error<P, F>(model: &P, grad: &P, per_tensor: usize, seed: u64, loss: F) -> (String, f64)
where
    P: Parameterized<f64> + Clone,
    F: Fn(&P) -> f64,
{
    let names: Vec<String> = grad.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut worst = (String::new(), 0.0);
    for coords in probe_coords(grad, per_tensor, seed) {
        let numeric = fd_params(model, &coords, &loss);
        let g = grad.named_tensors();
        let analytic: Vec<f64> = coords.iter().map(|&(ti, ei)| g[ti].1.data()[ei]).collect();
        let e = relative_error(&analytic, &numeric);
        if e > worst.1 {
            worst = (names[coords[0].0].clone(), e);
        }
    }
    worst
}

fn seg_loss_total(pairs: &Activation<f64>, out: &SegOutput<f64>, lambda: f64, norm: RegNormalization) -> f64 {
    seg_loss(pairs, out, lambda, norm, 1.0).unwrap().0.total
}

/// Relative error between the analytic segmentation-loss gradient and
/// central differences over every network output, on two 12×12 blob pairs
/// with K=3.
pub fn seg_loss_fd_error(norm: RegNormalization, lambda: f64, seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, k, s) = (2, 3, 12);
    let pairs = blob_pairs(&mut r, n, s, s);
    let out = random_output(&mut r, n, k, s, s, 1.5);
    let (_, g) = seg_loss(&pairs, &out, lambda, norm, 1.0).unwrap();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let probe = |edit: &dyn Fn(&mut SegOutput<f64>, f64)| {
        let mut plus = out.clone();
        edit(&mut plus, FD_STEP);
        let mut minus = out.clone();
        edit(&mut minus, -FD_STEP);
        (seg_loss_total(&pairs, &plus, lambda, norm) - seg_loss_total(&pairs, &minus, lambda, norm)) / (2.0 * FD_STEP)
    };
    for p in 0..out.masks.data.len() {
        analytic.push(g.masks.data[p]);
        numeric.push(probe(&|o, d| o.masks.data[p] += d));
    }
    for p in 0..out.object_translations.len() {
        analytic.push(g.object_translations[p]);
        numeric.push(probe(&|o, d| o.object_translations[p] += d));
    }
    for p in 0..out.camera_translation.len() {
        analytic.push(g.camera_translation[p]);
        numeric.push(probe(&|o, d| o.camera_translation[p] += d));
    }
    relative_error(&analytic, &numeric)
}

/// Moves behaviour log-probabilities and values away from the current
/// agent so ratios and value clipping are exercised.
pub fn perturb_behaviour(rollout: &mut RolloutBatch<f64>, seed: u64) {
    let mut r = rng(seed);
    for lp in rollout.log_probs.iter_mut() {
        *lp += r.random_range(-0.6..0.6);
    }
    for v in rollout.values.iter_mut() {
        *v += r.random_range(-0.6..0.6);
    }
}

/// Worst per-tensor relative error of the full update objective's
/// parameter gradient.
pub fn objective_fd_error(agent: &ActorCritic<f64>, rollout: &RolloutBatch<f64>, mode: PolicyLoss, joint: bool) -> (String, f64) {
    let cfg = UpdateConfig::default();
    let (ret, adv) = compute_advantages(rollout, cfg.gamma);
    let idx: Vec<usize> = (0..rollout.len()).collect();
    let mut grad = agent.zeros_like();
    objective(agent, rollout, &idx, &ret, &adv, &cfg, mode, joint, 7, &mut grad).unwrap();
    let total = |a: &ActorCritic<f64>| {
        let mut scratch = a.zeros_like();
        objective(a, rollout, &idx, &ret, &adv, &cfg, mode, joint, 7, &mut scratch)
            .unwrap()
            .total
    };
    worst_param_error(agent, &grad, 3, 8, total)
}

/// Chebyshev distance from each pixel to the nearest pixel where `a` and `b`
/// differ.
pub fn distance_to_error(a: &[f64], b: &[f64], h: usize, w: usize) -> Vec<usize> {
    let err: Vec<(usize, usize)> = (0..h * w).filter(|&p| a[p] != b[p]).map(|p| (p / w, p % w)).collect();
    (0..h * w)
        .map(|p| {
            let (i, j) = (p / w, p % w);
            err.iter().map(|&(ei, ej)| ei.abs_diff(i).max(ej.abs_diff(j))).min().unwrap_or(usize::MAX)
        })
        .collect()
}

pub struct Locality {
    /// Pixels at distance ≥ 5 from any reconstruction error with a nonzero
    /// DSSIM flow gradient.
    pub dssim_far: usize,
    /// Same count under per-pixel L1.
    pub l1_far: usize,
    /// Pixels with nonzero L1 flow gradient outside the error itself.
    pub l1_outside_error: usize,
}

/// 6×6 flat block moved 3 px right. The flow registers the left part of
/// the object and is zero elsewhere, so the only reconstruction error sits
/// at the block's right end; the left edge is reconstructed exactly.
pub fn block_locality() -> Locality {
    let (h, w, top, left) = (32, 32, 13, 10);
    let mut x0 = vec![0.0; h * w];
    let mut x1 = vec![0.0; h * w];
    for i in top..top + 6 {
        for j in left..left + 6 {
            x0[i * w + j] = 0.8;
            x1[i * w + j + 3] = 0.8;
        }
    }
    let mut flow = FlowField::zeros(h, w);
    for i in 0..h {
        for j in 0..left + 3 {
            flow.data[i * w + j] = 3.0;
        }
    }
    let recon = warp(&x1, &flow).unwrap();
    let dist = distance_to_error(&x0, &recon, h, w);

    let (_, _, d_dssim) = dssim_with_grad(&x0, &recon, h, w).unwrap();
    let (_, d_l1) = l1_with_grad(&x0, &recon);
    let (_, g_dssim) = warp_backward(&x1, &flow, &d_dssim).unwrap();
    let (_, g_l1) = warp_backward(&x1, &flow, &d_l1).unwrap();
    let nonzero = |g: &FlowField<f64>, p: usize| g.dx()[p] != 0.0 || g.dy()[p] != 0.0;
    Locality {
        dssim_far: (0..h * w).filter(|&p| dist[p] >= 5 && nonzero(&g_dssim, p)).count(),
        l1_far: (0..h * w).filter(|&p| dist[p] >= 5 && nonzero(&g_l1, p)).count(),
        l1_outside_error: (0..h * w).filter(|&p| dist[p] > 0 && nonzero(&g_l1, p)).count(),
    }
}

/// A freshly initialized full-size segmentation network and its checkpoint,
/// labelled as trained on 10k frames.
pub fn segnet_checkpoint(seed: u64) -> (SegNet<f32>, Checkpoint) {
    let net = SegNet::<f32>::new(SegNetConfig::default(), seed).unwrap();
    let cfg = SegCheckpointConfig {
        network: net.config,
        pretrain: PretrainConfig::default(),
        dataset_frames: 10_000,
    };
    let ck = Checkpoint::from_model(SEGNET_KIND, &net, 0, &cfg).unwrap();
    (net, ck)
}

pub fn sprite_pairs(n: usize, seed: u64) -> Vec<FramePair> {
    let mut w = SpriteWorld::new(EnvConfig::default()).unwrap();
    w.reset(seed);
    (0..n).map(|i| w.step(i % 5).unwrap().obs).collect()
}

/// Decoder and translation-head gradients, which only the segmentation loss
/// reaches.
pub fn seg_head_grads(g: &ActorCritic<f64>) -> Vec<f64> {
    match &g.body {
        Body::Dual { segnet, .. } => {
            let mut v = flat_params(&segnet.decoder);
            v.extend(flat_params(&segnet.translation));
            v
        }
        Body::Standard { .. } => unreachable!(),
    }
}

pub fn bits<T: Scalar, P: Parameterized<T>>(p: &P) -> Vec<u64> {
    let mut v = Vec::new();
    p.visit("", &mut |_, t| v.extend(t.data().iter().map(|x| x.as_f64().to_bits())));
    v
}
