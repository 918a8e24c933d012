use morel_core::checkpoint::file_sha256;
use morel_core::env::{collect_random, Dataset, RewardMode, SpriteShape, FRAME_SIDE};
use morel_core::{EnvConfig, SpriteWorld};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn play(config: &EnvConfig, seed: u64, actions: &[usize]) -> Vec<(Vec<f32>, f32, Vec<Vec<bool>>)> {
    let mut w = SpriteWorld::new(config.clone()).unwrap();
    w.reset(seed);
    actions
        .iter()
        .map(|&a| {
            let t = w.step(a).unwrap();
            (t.obs.curr.pixels, t.reward, w.ground_truth().unwrap().masks)
        })
        .collect()
}

#[test]
fn same_seed_and_actions_replay_exactly() {
    let cfg = EnvConfig::default();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let actions: Vec<usize> = (0..200).map(|_| r.random_range(0..5)).collect();
    let a = play(&cfg, 42, &actions);
    assert_eq!(a, play(&cfg, 42, &actions));
    assert_ne!(a, play(&cfg, 43, &actions));
}

#[test]
fn frames_in_unit_range_and_rewards_bounded() {
    for mode in [RewardMode::Catch, RewardMode::Avoid] {
        let cfg = EnvConfig {
            reward_mode: mode,
            num_sprites: 6,
            ..EnvConfig::default()
        };
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let actions: Vec<usize> = (0..300).map(|_| r.random_range(0..5)).collect();
        for (px, reward, _) in play(&cfg, 7, &actions) {
            assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!([-1.0, 0.0, 1.0].contains(&reward));
        }
    }
}

fn shifted_overlap(prev: &[bool], curr: &[bool], t: [f32; 2]) -> Option<f64> {
    let n = FRAME_SIDE as i32;
    let (dx, dy) = (t[0] as i32, t[1] as i32);
    let touches_border = |m: &[bool]| {
        (0..FRAME_SIDE * FRAME_SIDE)
            .any(|p| m[p] && (p / FRAME_SIDE == 0 || p % FRAME_SIDE == 0 || p / FRAME_SIDE == FRAME_SIDE - 1 || p % FRAME_SIDE == FRAME_SIDE - 1))
    };
    let area = |m: &[bool]| m.iter().filter(|&&b| b).count();
    if touches_border(prev) || touches_border(curr) || area(prev) == 0 || area(prev) != area(curr) {
        return None;
    }
    let mut hit = 0;
    for i in 0..n {
        for j in 0..n {
            if prev[(i * n + j) as usize] {
                let (ii, jj) = (i + dy, j + dx);
                if (0..n).contains(&ii) && (0..n).contains(&jj) && curr[(ii * n + jj) as usize] {
                    hit += 1;
                }
            }
        }
    }
    Some(hit as f64 / area(prev) as f64)
}

#[test]
fn masks_move_with_their_true_translation() {
    let cfg = EnvConfig {
        num_sprites: 2,
        sprite_shapes: vec![SpriteShape::Square, SpriteShape::Circle],
        sprite_size_px: 10,
        ..EnvConfig::default()
    };
    let mut w = SpriteWorld::new(cfg).unwrap();
    w.reset(5);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for _ in 0..400 {
        w.step(r.random_range(0..5)).unwrap();
        let prev = w.ground_truth_previous().unwrap();
        let curr = w.ground_truth().unwrap();
        for k in 0..2 {
            if curr.respawned[k] {
                continue;
            }
            if let Some(o) = shifted_overlap(&prev.masks[k], &curr.masks[k], curr.translations[k]) {
                assert!(o >= 0.9, "sprite {k}: overlap {o}");
                checked += 1;
            }
        }
    }
    assert!(checked > 100, "only {checked} interior cases");
}

#[test]
fn collection_is_byte_identical_and_pairs_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.sprt"), dir.path().join("b.sprt"));
    let cfg = EnvConfig {
        episode_len: 7,
        ..EnvConfig::default()
    };
    collect_random(&cfg, 3, 20, &a).unwrap();
    collect_random(&cfg, 3, 20, &b).unwrap();
    assert_eq!(file_sha256(&a).unwrap(), file_sha256(&b).unwrap());

    let mut ds = Dataset::open(&a).unwrap();
    assert_eq!((ds.frame_count(), ds.num_pairs()), (20, 19));
    assert_eq!(ds.header().config, cfg);
    for i in 0..19 {
        let p = ds.pair(i).unwrap();
        assert_eq!(p.prev, ds.frame(i).unwrap());
        assert_eq!(p.curr, ds.frame(i + 1).unwrap());
    }
    assert!(ds.frame(20).is_err());
}

#[test]
fn truncated_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.sprt");
    collect_random(&EnvConfig::default(), 0, 4, &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
    assert!(Dataset::open(&p).is_err());
}
