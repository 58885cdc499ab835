//! Deterministic moving-sprite videos.
//!
//! Each clip has a drifting sinusoidal background and a few flat-coloured
//! sprites (squares or discs) that translate, rotate or change scale. Every
//! clip is generated from its own seed derived from the master seed and the
//! clip index, so clips can be produced in any order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::tensor::NdTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    Translate,
    Rotate,
    Scale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub sprites: usize,
    pub motions: Vec<MotionKind>,
    /// RGB colours in `[-1, 1]`.
    pub palette: Vec<[f32; 3]>,
    /// Amplitude of the background texture.
    pub background_amplitude: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clips: 2000,
            frames: 9,
            height: 32,
            width: 32,
            sprites: 2,
            motions: vec![MotionKind::Translate, MotionKind::Rotate, MotionKind::Scale],
            palette: vec![
                [0.9, -0.6, -0.6],
                [-0.6, 0.8, -0.5],
                [-0.5, -0.4, 0.9],
                [0.9, 0.8, -0.7],
                [0.8, 0.8, 0.8],
                [-0.8, 0.7, 0.8],
            ],
            background_amplitude: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clips == 0 || self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(config_err!("dataset extents must be positive"));
        }
        if self.motions.is_empty() || self.palette.is_empty() {
            return Err(config_err!("motions and palette must be non-empty"));
        }
        let ok = |v: f32| (-1.0..=1.0).contains(&v);
        if !self.palette.iter().flatten().all(|&v| ok(v))
            || !(0.0..=1.0).contains(&self.background_amplitude)
        {
            return Err(config_err!(
                "palette and background amplitude must stay within [-1, 1]"
            ));
        }
        Ok(())
    }

    /// Mean squared value of a background pixel.
    pub fn expected_background_energy(&self) -> f64 {
        (self.background_amplitude as f64).powi(2) / 2.0
    }

    /// Mean squared value of a sprite pixel, colours drawn uniformly.
    pub fn expected_sprite_energy(&self) -> f64 {
        let n = self.palette.len() as f64;
        self.palette
            .iter()
            .flatten()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            / (3.0 * n)
    }
}

/// SplitMix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn clip_seed(master: u64, index: usize) -> u64 {
    splitmix64(master ^ splitmix64(index as u64))
}

struct Sprite {
    motion: usize,
    disc: bool,
    color: [f32; 3],
    center: (f32, f32),
    velocity: (f32, f32),
    radius: f32,
    angle: f32,
    spin: f32,
    growth: f32,
}

impl Sprite {
    fn sample(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let (h, w) = (spec.height as f32, spec.width as f32);
        let motion_index = rng.random_range(0..spec.motions.len());
        let motion = spec.motions[motion_index];
        let color = spec.palette[rng.random_range(0..spec.palette.len())];
        let speed = 0.05 * w.min(h);
        let mut s = Self {
            motion: motion_index,
            disc: rng.random_bool(0.5),
            color,
            center: (
                rng.random_range(0.2..0.8) * w,
                rng.random_range(0.2..0.8) * h,
            ),
            velocity: (
                rng.random_range(-speed..speed),
                rng.random_range(-speed..speed),
            ),
            radius: rng.random_range(0.1..0.22) * w.min(h),
            angle: rng.random_range(0.0..std::f32::consts::PI),
            spin: 0.0,
            growth: 0.0,
        };
        match motion {
            MotionKind::Translate => {}
            MotionKind::Rotate => {
                s.velocity = (0.25 * s.velocity.0, 0.25 * s.velocity.1);
                s.spin =
                    rng.random_range(0.15..0.35) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            }
            MotionKind::Scale => {
                s.velocity = (0.25 * s.velocity.0, 0.25 * s.velocity.1);
                s.growth =
                    rng.random_range(0.04..0.08) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            }
        }
        s
    }

    fn covers(&self, f: usize, x: f32, y: f32) -> bool {
        let f = f as f32;
        let cx = self.center.0 + self.velocity.0 * f;
        let cy = self.center.1 + self.velocity.1 * f;
        let scale = (1.0 + self.growth * f).max(0.3);
        let (sin, cos) = (self.angle + self.spin * f).sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        let u = (cos * dx + sin * dy) / scale;
        let v = (-sin * dx + cos * dy) / scale;
        if self.disc {
            u * u + v * v <= self.radius * self.radius
        } else {
            u.abs().max(v.abs()) <= self.radius
        }
    }
}

struct Scene {
    freq: (f32, f32),
    phase: f32,
    drift: f32,
    sprites: Vec<Sprite>,
}

impl Scene {
    fn sample(spec: &SyntheticSpec, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(spec.seed, index));
        let freq = (rng.random_range(0.5..2.5f32), rng.random_range(0.5..2.5f32));
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        let drift = rng.random_range(-0.4..0.4f32);
        let sprites = (0..spec.sprites)
            .map(|_| Sprite::sample(spec, &mut rng))
            .collect();
        Self {
            freq,
            phase,
            drift,
            sprites,
        }
    }
}

/// Class label of a clip: the index into `spec.motions` of its first sprite's
/// motion, or 0 for sprite-free clips.
pub fn clip_label(spec: &SyntheticSpec, index: usize) -> usize {
    Scene::sample(spec, index)
        .sprites
        .first()
        .map_or(0, |s| s.motion)
}

/// Renders clip `index` together with its sprite coverage mask (`[T,H,W]`).
pub fn render_clip(spec: &SyntheticSpec, index: usize) -> (NdTensor, Vec<bool>) {
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let tau = std::f32::consts::TAU;
    let Scene {
        freq,
        phase,
        drift,
        sprites,
    } = Scene::sample(spec, index);
    let amp = spec.background_amplitude;
    let mut data = vec![0.0f32; t * h * w * 3];
    let mut mask = vec![false; t * h * w];
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let p = (f * h + y) * w + x;
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let hit = sprites.iter().rev().find(|s| s.covers(f, px, py));
                let arg = tau * (freq.0 * px / w as f32 + freq.1 * py / h as f32)
                    + phase
                    + drift * f as f32;
                for ch in 0..3 {
                    data[p * 3 + ch] = match hit {
                        Some(s) => s.color[ch],
                        None => amp * (arg + 2.1 * ch as f32).sin(),
                    };
                }
                mask[p] = hit.is_some();
            }
        }
    }
    (
        NdTensor::new([t, h, w, 3], data).expect("consistent extents"),
        mask,
    )
}

pub fn generate_clip(spec: &SyntheticSpec, index: usize) -> NdTensor {
    render_clip(spec, index).0
}
