//! Sprite World: a deterministic 84×84 grayscale environment with textureless
//! moving sprites, a controllable avatar and exact ground-truth masks.

mod dataset;

pub use dataset::{collect_random, pairs_to_activation, Dataset, DatasetHeader, PairSampler, DATASET_MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FRAME_SIDE: usize = 84;
pub const FRAME_PIXELS: usize = FRAME_SIDE * FRAME_SIDE;
pub const NUM_ACTIONS: usize = 5;
pub const AVATAR_SIZE: i32 = 7;
pub const AVATAR_INTENSITY: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteShape {
    Square,
    Circle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Catch,
    Avoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Noop = 0,
    Up = 1,
    Down = 2,
    Left = 3,
    Right = 4,
}

impl Action {
    pub fn from_index(a: usize) -> Result<Self> {
        Ok(match a {
            0 => Action::Noop,
            1 => Action::Up,
            2 => Action::Down,
            3 => Action::Left,
            4 => Action::Right,
            _ => return Err(Error::Argument(format!("action {a} outside [0, {NUM_ACTIONS})"))),
        })
    }

    fn delta(self) -> (i32, i32) {
        match self {
            Action::Noop => (0, 0),
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub seed: u64,
    pub num_sprites: usize,
    /// Shape of sprite `i` is `sprite_shapes[i % len]`.
    pub sprite_shapes: Vec<SpriteShape>,
    pub sprite_size_px: u32,
    /// Per-axis speed bound; sprite velocities are drawn from the integer
    /// lattice inside `[-bound, bound]`, excluding the zero vector.
    pub sprite_speed_px: [f32; 2],
    /// Explicit per-sprite velocities, overriding the random draw.
    pub sprite_velocities: Option<Vec<[f32; 2]>>,
    pub camera_scroll_px: [f32; 2],
    pub avatar_speed_px: u32,
    pub episode_len: u32,
    pub reward_mode: RewardMode,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_sprites: 3,
            sprite_shapes: vec![SpriteShape::Square, SpriteShape::Circle],
            sprite_size_px: 8,
            sprite_speed_px: [3.0, 3.0],
            sprite_velocities: None,
            camera_scroll_px: [0.0, 0.0],
            avatar_speed_px: 2,
            episode_len: 1000,
            reward_mode: RewardMode::Catch,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(4..=16).contains(&self.sprite_size_px) {
            return Err(Error::config("sprite_size_px", format!("{} not in [4, 16]", self.sprite_size_px)));
        }
        if self.num_sprites > 0 && self.sprite_shapes.is_empty() {
            return Err(Error::config("sprite_shapes", "at least one shape is required"));
        }
        for s in self.sprite_speed_px {
            if !(0.0..=3.0).contains(&s) {
                return Err(Error::config("sprite_speed_px", format!("bound {s} not in [0, 3]")));
            }
        }
        if let Some(v) = &self.sprite_velocities {
            if v.len() != self.num_sprites {
                return Err(Error::config(
                    "sprite_velocities",
                    format!("{} velocities for {} sprites", v.len(), self.num_sprites),
                ));
            }
            if v.iter().flatten().any(|c| !(-3.0..=3.0).contains(c)) {
                return Err(Error::config("sprite_velocities", "components must lie in [-3, 3]"));
            }
        }
        if self.camera_scroll_px.iter().any(|c| !c.is_finite() || c.abs() > 3.0) {
            return Err(Error::config("camera_scroll_px", "components must lie in [-3, 3]"));
        }
        if self.avatar_speed_px == 0 || self.avatar_speed_px > 8 {
            return Err(Error::config("avatar_speed_px", "must be in [1, 8]"));
        }
        if self.episode_len == 0 {
            return Err(Error::config("episode_len", "must be positive"));
        }
        Ok(())
    }
}

/// One 84×84 grayscale frame, values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn blank() -> Self {
        Self {
            pixels: vec![0.0; FRAME_PIXELS],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * FRAME_SIDE + col]
    }
}

/// Older frame first.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub prev: Frame,
    pub curr: Frame,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: FramePair,
    pub action: usize,
    pub reward: f32,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthMasks {
    /// One binary `84×84` mask per sprite (visible pixels).
    pub masks: Vec<Vec<bool>>,
    /// True per-sprite translation since the previous frame, (dx, dy).
    pub translations: Vec<[f32; 2]>,
    /// Sprites that respawned this step; their translation is not a motion.
    pub respawned: Vec<bool>,
}

impl GroundTruthMasks {
    pub fn area(&self, k: usize) -> usize {
        self.masks[k].iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug)]
struct Sprite {
    x: f32,
    y: f32,
    vel: [f32; 2],
    shape: SpriteShape,
    intensity: f32,
    respawned: bool,
}

#[derive(Clone, Debug)]
struct State {
    rng: ChaCha8Rng,
    sprites: Vec<Sprite>,
    avatar: (i32, i32),
    t: u32,
    frame: Frame,
    prev_frame: Frame,
    owner: Vec<u8>,
    prev_owner: Vec<u8>,
}

const NO_OWNER: u8 = u8::MAX;
const AVATAR_OWNER: u8 = u8::MAX - 1;

#[derive(Clone, Debug)]
pub struct SpriteWorld {
    config: EnvConfig,
    state: Option<State>,
}

impl SpriteWorld {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        if config.num_sprites >= AVATAR_OWNER as usize {
            return Err(Error::config("num_sprites", "too many sprites"));
        }
        Ok(Self { config, state: None })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    /// Starts a new episode; placement of sprites and avatar, and every later
    /// respawn, is drawn from a stream seeded by `seed`.
    pub fn reset(&mut self, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.config.num_sprites;
        let size = self.config.sprite_size_px as i32;
        let max_pos = (FRAME_SIDE as i32 - AVATAR_SIZE) as f32;
        let avatar = (
            rng.random_range(0..=max_pos as i32),
            rng.random_range(0..=max_pos as i32),
        );
        let mut sprites = Vec::with_capacity(n);
        for i in 0..n {
            let vel = match &self.config.sprite_velocities {
                Some(v) => v[i],
                None => draw_velocity(&mut rng, self.config.sprite_speed_px),
            };
            let (x, y) = spawn_position(&mut rng, size, avatar);
            sprites.push(Sprite {
                x,
                y,
                vel,
                shape: self.config.sprite_shapes[i % self.config.sprite_shapes.len()],
                intensity: 0.3 + 0.6 * (i + 1) as f32 / (n + 1) as f32,
                respawned: false,
            });
        }
        let mut state = State {
            rng,
            sprites,
            avatar,
            t: 0,
            frame: Frame::blank(),
            prev_frame: Frame::blank(),
            owner: vec![NO_OWNER; FRAME_PIXELS],
            prev_owner: vec![NO_OWNER; FRAME_PIXELS],
        };
        render(&self.config, &mut state);
        state.prev_frame = state.frame.clone();
        state.prev_owner = state.owner.clone();
        let first = state.frame.clone();
        self.state = Some(state);
        first
    }

    pub fn step(&mut self, action: usize) -> Result<Transition> {
        let action = Action::from_index(action)?;
        let cfg = &self.config;
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| Error::State("step called before reset".into()))?;
        if state.t >= cfg.episode_len {
            return Err(Error::State("episode finished; call reset".into()));
        }
        let size = cfg.sprite_size_px as i32;
        let (dx, dy) = action.delta();
        let speed = cfg.avatar_speed_px as i32;
        let max_pos = FRAME_SIDE as i32 - AVATAR_SIZE;
        state.avatar.0 = (state.avatar.0 + dx * speed).clamp(0, max_pos);
        state.avatar.1 = (state.avatar.1 + dy * speed).clamp(0, max_pos);

        let scroll = cfg.camera_scroll_px;
        let avatar = state.avatar;
        for s in state.sprites.iter_mut() {
            s.respawned = false;
            s.x += s.vel[0] + scroll[0];
            s.y += s.vel[1] + scroll[1];
            let (rx, ry) = (s.x.round() as i32, s.y.round() as i32);
            let gone = rx >= FRAME_SIDE as i32 || ry >= FRAME_SIDE as i32 || rx + size <= 0 || ry + size <= 0;
            if gone {
                (s.x, s.y) = spawn_position(&mut state.rng, size, avatar);
                s.respawned = true;
            }
        }
        let mut hit = false;
        for s in state.sprites.iter_mut() {
            let (rx, ry) = (s.x.round() as i32, s.y.round() as i32);
            let overlap = rx < avatar.0 + AVATAR_SIZE
                && avatar.0 < rx + size
                && ry < avatar.1 + AVATAR_SIZE
                && avatar.1 < ry + size;
            if overlap {
                hit = true;
                (s.x, s.y) = spawn_position(&mut state.rng, size, avatar);
                s.respawned = true;
            }
        }
        let reward = match (hit, cfg.reward_mode) {
            (false, _) => 0.0,
            (true, RewardMode::Catch) => 1.0,
            (true, RewardMode::Avoid) => -1.0,
        };
        state.prev_frame = std::mem::replace(&mut state.frame, Frame::blank());
        std::mem::swap(&mut state.prev_owner, &mut state.owner);
        render(cfg, state);
        state.t += 1;
        Ok(Transition {
            obs: FramePair {
                prev: state.prev_frame.clone(),
                curr: state.frame.clone(),
            },
            action: action as usize,
            reward,
            done: state.t >= cfg.episode_len,
        })
    }

    /// Current observation pair without stepping.
    pub fn observation(&self) -> Result<FramePair> {
        let s = self.state()?;
        Ok(FramePair {
            prev: s.prev_frame.clone(),
            curr: s.frame.clone(),
        })
    }

    pub fn steps_taken(&self) -> Result<u32> {
        Ok(self.state()?.t)
    }

    fn state(&self) -> Result<&State> {
        self.state
            .as_ref()
            .ok_or_else(|| Error::State("environment has not been reset".into()))
    }

    /// Masks and true translations for the current frame.
    pub fn ground_truth(&self) -> Result<GroundTruthMasks> {
        let s = self.state()?;
        Ok(self.truth_from(s, &s.owner))
    }

    /// Masks of the previous frame (the pixel grid the predicted flow lives
    /// on), with the translations that carried those sprites into the
    /// current frame.
    pub fn ground_truth_previous(&self) -> Result<GroundTruthMasks> {
        let s = self.state()?;
        Ok(self.truth_from(s, &s.prev_owner))
    }

    fn truth_from(&self, s: &State, owner: &[u8]) -> GroundTruthMasks {
        let scroll = self.config.camera_scroll_px;
        GroundTruthMasks {
            masks: (0..s.sprites.len())
                .map(|k| owner.iter().map(|&o| o as usize == k).collect())
                .collect(),
            translations: s
                .sprites
                .iter()
                .map(|sp| [sp.vel[0] + scroll[0], sp.vel[1] + scroll[1]])
                .collect(),
            respawned: s.sprites.iter().map(|sp| sp.respawned).collect(),
        }
    }

    #[cfg(test)]
    fn place(&mut self, sprite: usize, x: f32, y: f32, avatar: (i32, i32)) {
        let cfg = self.config.clone();
        let s = self.state.as_mut().unwrap();
        s.sprites[sprite].x = x;
        s.sprites[sprite].y = y;
        s.avatar = avatar;
        render(&cfg, s);
        s.prev_frame = s.frame.clone();
        s.prev_owner = s.owner.clone();
    }
}

fn draw_velocity(rng: &mut ChaCha8Rng, bound: [f32; 2]) -> [f32; 2] {
    let (bx, by) = (bound[0].floor() as i32, bound[1].floor() as i32);
    if bx == 0 && by == 0 {
        return [0.0, 0.0];
    }
    loop {
        let v = [rng.random_range(-bx..=bx), rng.random_range(-by..=by)];
        if v != [0, 0] {
            return [v[0] as f32, v[1] as f32];
        }
    }
}

/// Uniform position with the sprite fully inside the frame, retrying a few
/// times to avoid spawning on the avatar.
fn spawn_position(rng: &mut ChaCha8Rng, size: i32, avatar: (i32, i32)) -> (f32, f32) {
    let max = FRAME_SIDE as i32 - size;
    let mut pos = (0, 0);
    for _ in 0..16 {
        pos = (rng.random_range(0..=max), rng.random_range(0..=max));
        let clear = pos.0 >= avatar.0 + AVATAR_SIZE
            || avatar.0 >= pos.0 + size
            || pos.1 >= avatar.1 + AVATAR_SIZE
            || avatar.1 >= pos.1 + size;
        if clear {
            break;
        }
    }
    (pos.0 as f32, pos.1 as f32)
}

fn render(cfg: &EnvConfig, s: &mut State) {
    let size = cfg.sprite_size_px as i32;
    s.frame.pixels.fill(0.0);
    s.owner.fill(NO_OWNER);
    for (k, sp) in s.sprites.iter().enumerate() {
        let (rx, ry) = (sp.x.round() as i32, sp.y.round() as i32);
        let r = size as f32 / 2.0;
        let (cx, cy) = (rx as f32 + r - 0.5, ry as f32 + r - 0.5);
        for i in ry.max(0)..(ry + size).min(FRAME_SIDE as i32) {
            for j in rx.max(0)..(rx + size).min(FRAME_SIDE as i32) {
                let inside = match sp.shape {
                    SpriteShape::Square => true,
                    SpriteShape::Circle => {
                        let (dx, dy) = (j as f32 - cx, i as f32 - cy);
                        dx * dx + dy * dy <= r * r
                    }
                };
                if inside {
                    let p = i as usize * FRAME_SIDE + j as usize;
                    s.frame.pixels[p] = sp.intensity;
                    s.owner[p] = k as u8;
                }
            }
        }
    }
    let (ax, ay) = s.avatar;
    for i in ay..ay + AVATAR_SIZE {
        for j in ax..ax + AVATAR_SIZE {
            let edge = i == ay || i == ay + AVATAR_SIZE - 1 || j == ax || j == ax + AVATAR_SIZE - 1;
            if edge {
                let p = i as usize * FRAME_SIDE + j as usize;
                s.frame.pixels[p] = AVATAR_INTENSITY;
                s.owner[p] = AVATAR_OWNER;
            }
        }
    }
}
