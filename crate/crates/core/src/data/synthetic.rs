//! Procedural day/night action clips.
//!
//! A bright shape moves over a static textured background following one of
//! up to twelve motion programs; the program is the action class. Target
//! ("night") clips are rendered the same way and then darkened, contrast
//! compressed and corrupted with sensor noise by [`night_transform`]. Class
//! identity lives in shape and motion, so it survives the transform, while
//! raw intensity statistics separate the domains trivially.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, Clip, DatasetSplit, Domain};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of `v' = clamp((gain·v)^gamma_curve + N(0, noise_sigma²), 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NightParams {
    pub gain: f64,
    pub noise_sigma: f64,
    pub gamma_curve: f64,
}

impl Default for NightParams {
    fn default() -> Self {
        Self {
            gain: 0.15,
            noise_sigma: 0.03,
            gamma_curve: 1.5,
        }
    }
}

impl NightParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gain) || !(self.noise_sigma >= 0.0) || !(self.gamma_curve >= 1.0) {
            return Err(Error::invalid(format!(
                "night parameters need gain in [0, 1], noise ≥ 0, gamma ≥ 1: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub clips_per_class_per_domain: usize,
    /// `(C, T, H, W)`.
    pub clip_shape: [usize; 4],
    pub night: NightParams,
    /// Scales every displacement of the motion programs.
    pub motion_amplitude: f64,
    /// Range of the shape's half-size in pixels.
    pub shape_radius: [f64; 2],
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            clips_per_class_per_domain: 50,
            clip_shape: [1, 16, 32, 32],
            night: NightParams::default(),
            motion_amplitude: 1.0,
            shape_radius: [3.5, 5.0],
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MotionProgram::ALL.len()).contains(&self.num_classes) {
            return Err(Error::invalid(format!(
                "num_classes must be in 2..={}, got {}",
                MotionProgram::ALL.len(),
                self.num_classes
            )));
        }
        if self.clips_per_class_per_domain < 2 {
            return Err(Error::invalid("need at least two clips per class and domain"));
        }
        let [c, t, h, w] = self.clip_shape;
        if c == 0 || t < 2 || h < 8 || w < 8 {
            return Err(Error::invalid(format!(
                "clip shape {:?} too small (need T ≥ 2, H, W ≥ 8)",
                self.clip_shape
            )));
        }
        if !(self.motion_amplitude > 0.0 && self.motion_amplitude <= 2.0) {
            return Err(Error::invalid("motion_amplitude must be in (0, 2]"));
        }
        let [r0, r1] = self.shape_radius;
        if !(r0 >= 0.5 && r1 >= r0 && 2.0 * r1 + 2.0 < h.min(w) as f64) {
            return Err(Error::invalid(format!(
                "shape_radius {:?} must satisfy 0.5 ≤ min ≤ max and fit the frame",
                self.shape_radius
            )));
        }
        self.night.validate()
    }
}

/// The motion program executed by the shape; one per action class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionProgram {
    TranslateRight,
    TranslateUp,
    Diagonal,
    Oscillate,
    Grow,
    Shrink,
    TranslateLeft,
    TranslateDown,
    AntiDiagonal,
    OscillateVertical,
    Circle,
    Blink,
}

impl MotionProgram {
    pub const ALL: [MotionProgram; 12] = [
        MotionProgram::TranslateRight,
        MotionProgram::TranslateUp,
        MotionProgram::Diagonal,
        MotionProgram::Oscillate,
        MotionProgram::Grow,
        MotionProgram::Shrink,
        MotionProgram::TranslateLeft,
        MotionProgram::TranslateDown,
        MotionProgram::AntiDiagonal,
        MotionProgram::OscillateVertical,
        MotionProgram::Circle,
        MotionProgram::Blink,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionProgram::TranslateRight => "translate_right",
            MotionProgram::TranslateUp => "translate_up",
            MotionProgram::Diagonal => "diagonal",
            MotionProgram::Oscillate => "oscillate",
            MotionProgram::Grow => "grow",
            MotionProgram::Shrink => "shrink",
            MotionProgram::TranslateLeft => "translate_left",
            MotionProgram::TranslateDown => "translate_down",
            MotionProgram::AntiDiagonal => "anti_diagonal",
            MotionProgram::OscillateVertical => "oscillate_vertical",
            MotionProgram::Circle => "circle",
            MotionProgram::Blink => "blink",
        }
    }
}

pub fn class_names(k: usize) -> Vec<String> {
    MotionProgram::ALL[..k.min(12)]
        .iter()
        .map(|m| m.name().to_string())
        .collect()
}

/// Per-instance random draws shared by every motion program.
struct Instance {
    disc: bool,
    radius: f64,
    intensity: f64,
    /// Displacement magnitude as a fraction of the frame size.
    travel: f64,
    /// Start-position jitter in `[0, 1]²`.
    jitter: (f64, f64),
    period: f64,
    phase: f64,
    background: Background,
}

struct Background {
    level: f64,
    amplitude: f64,
    freq: (f64, f64),
    phase: (f64, f64),
    grain: Vec<f64>,
}

impl Background {
    fn at(&self, x: usize, y: usize, w: usize) -> f64 {
        let (fx, fy) = self.freq;
        let (px, py) = self.phase;
        self.level
            + self.amplitude * (fx * x as f64 + px).sin() * (fy * y as f64 + py).cos()
            + self.grain[y * w + x]
    }
}

/// Shape centre `(x, y)` in pixels and radius at normalized time `tau`.
fn pose(program: MotionProgram, inst: &Instance, tau: f64, w: f64, h: f64, amp: f64) -> (f64, f64, f64, bool) {
    let r = inst.radius;
    let d = inst.travel * amp;
    let (jx, jy) = inst.jitter;
    // start coordinate range that keeps a path of length `len` inside [margin, size − margin]
    let place = |size: f64, len: f64, j: f64| {
        let margin = r + 1.0;
        let span = (size - 2.0 * margin - len).max(0.0);
        margin + j * span
    };
    let centre = |size: f64, j: f64| size / 2.0 + (j - 0.5) * size * 0.2;
    match program {
        MotionProgram::TranslateRight | MotionProgram::TranslateLeft => {
            let len = d * w;
            let x0 = place(w, len, jx);
            let x = if program == MotionProgram::TranslateRight {
                x0 + len * tau
            } else {
                x0 + len * (1.0 - tau)
            };
            (x, place(h, 0.0, jy), r, true)
        }
        MotionProgram::TranslateUp | MotionProgram::TranslateDown => {
            let len = d * h;
            let y0 = place(h, len, jy);
            let y = if program == MotionProgram::TranslateDown {
                y0 + len * tau
            } else {
                y0 + len * (1.0 - tau)
            };
            (place(w, 0.0, jx), y, r, true)
        }
        MotionProgram::Diagonal | MotionProgram::AntiDiagonal => {
            let (lx, ly) = (d * w * 0.8, d * h * 0.8);
            let x = place(w, lx, jx) + lx * tau;
            let y0 = place(h, ly, jy);
            let y = if program == MotionProgram::Diagonal {
                y0 + ly * tau
            } else {
                y0 + ly * (1.0 - tau)
            };
            (x, y, r, true)
        }
        MotionProgram::Oscillate | MotionProgram::OscillateVertical => {
            let a = d * 0.4;
            let s = (2.0 * PI * tau * inst.period + inst.phase).sin();
            if program == MotionProgram::Oscillate {
                (centre(w, jx) + a * w * s, place(h, 0.0, jy), r, true)
            } else {
                (place(w, 0.0, jx), centre(h, jy) + a * h * s, r, true)
            }
        }
        MotionProgram::Grow | MotionProgram::Shrink => {
            let small = 1.0;
            let large = (w.min(h) * 0.22 * amp).max(small + 1.0);
            let f = if program == MotionProgram::Grow { tau } else { 1.0 - tau };
            (centre(w, jx), centre(h, jy), small + (large - small) * f, true)
        }
        MotionProgram::Circle => {
            let a = d * 0.3;
            let ang = 2.0 * PI * tau + inst.phase;
            (
                centre(w, jx) + a * w * ang.cos(),
                centre(h, jy) + a * h * ang.sin(),
                r,
                true,
            )
        }
        MotionProgram::Blink => {
            let on = ((tau * inst.period * 2.0 + inst.phase / PI).floor() as i64) % 2 == 0;
            (centre(w, jx), centre(h, jy), r, on)
        }
    }
}

fn draw_instance(rng: &mut ChaCha8Rng, h: usize, w: usize, radius: [f64; 2]) -> Instance {
    let grain = (0..h * w).map(|_| rng.random_range(-0.03..0.03)).collect();
    Instance {
        disc: rng.random_bool(0.5),
        radius: if radius[1] > radius[0] {
            rng.random_range(radius[0]..radius[1])
        } else {
            radius[0]
        },
        intensity: rng.random_range(0.85..1.0),
        travel: rng.random_range(0.4..0.5),
        jitter: (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
        period: rng.random_range(1.5..2.5),
        phase: rng.random_range(0.0..2.0 * PI),
        background: Background {
            level: rng.random_range(0.25..0.35),
            amplitude: rng.random_range(0.05..0.1),
            freq: (rng.random_range(0.15..0.45), rng.random_range(0.15..0.45)),
            phase: (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)),
            grain,
        },
    }
}

/// Renders one clip. The render depends only on `(cfg.seed, instance_seed)`
/// and the action; `domain` selects whether [`night_transform`] follows.
pub fn generate_clip(action: usize, domain: Domain, cfg: &SyntheticConfig, instance_seed: u64) -> Result<Clip> {
    if action >= cfg.num_classes || action >= MotionProgram::ALL.len() {
        return Err(Error::invalid(format!(
            "action {action} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let program = MotionProgram::ALL[action];
    let [c, t, h, w] = cfg.clip_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, instance_seed));
    let inst = draw_instance(&mut rng, h, w, cfg.shape_radius);

    let plane = h * w;
    let mut frames = vec![0f32; t * plane];
    for ti in 0..t {
        let tau = ti as f64 / (t - 1) as f64;
        let (cx, cy, r, visible) = pose(program, &inst, tau, w as f64, h as f64, cfg.motion_amplitude);
        for y in 0..h {
            for x in 0..w {
                let bg = inst.background.at(x, y, w);
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let dist = if inst.disc {
                    (dx * dx + dy * dy).sqrt()
                } else {
                    dx.abs().max(dy.abs())
                };
                let cover = if visible { (r + 0.5 - dist).clamp(0.0, 1.0) } else { 0.0 };
                let v = bg * (1.0 - cover) + inst.intensity * cover;
                frames[ti * plane + y * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    let mut data = Vec::with_capacity(c * frames.len());
    for _ in 0..c {
        data.extend_from_slice(&frames);
    }
    let clip = Clip {
        id: String::new(),
        video: Tensor::new(&cfg.clip_shape, data)?,
        action: Some(action),
        domain: Domain::Source,
    };
    Ok(match domain {
        Domain::Source => clip,
        Domain::Target => night_transform(clip, &cfg.night, mix_seed(cfg.seed ^ NIGHT_SALT, instance_seed)),
    })
}

const NIGHT_SALT: u64 = 0x6e69_6768_7400_0001;

/// Darkens, compresses and adds noise: `clamp((gain·v)^g + N(0, σ²), 0, 1)`.
/// The result is labelled as the target domain.
pub fn night_transform(mut clip: Clip, params: &NightParams, noise_seed: u64) -> Clip {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = (params.noise_sigma > 0.0).then(|| Normal::new(0.0, params.noise_sigma).expect("finite sigma"));
    for v in clip.video.data_mut() {
        let mut y = (params.gain * *v as f64).powf(params.gamma_curve);
        if let Some(n) = &noise {
            y += n.sample(&mut rng);
        }
        *v = y.clamp(0.0, 1.0) as f32;
    }
    clip.domain = Domain::Target;
    clip
}

/// Fraction of each class's instances (by index) assigned to training.
pub const TRAIN_FRACTION: f64 = 0.6;

/// Balanced day/night dataset with a deterministic 60/40 split by instance
/// index inside every (domain, class) cell.
pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let n = cfg.clips_per_class_per_domain;
    let n_train = ((n as f64) * TRAIN_FRACTION).round() as usize;
    let mut split = DatasetSplit::default();
    for domain in [Domain::Source, Domain::Target] {
        for action in 0..cfg.num_classes {
            for i in 0..n {
                let instance_seed = domain.index() as u64 * 1_000_000 + action as u64 * 10_000 + i as u64;
                let mut clip = generate_clip(action, domain, cfg, instance_seed)?;
                clip.id = format!("{}-a{action:02}-i{i:04}", domain.short());
                let train = i < n_train;
                match (domain, train) {
                    (Domain::Source, true) => split.train_source.push(clip),
                    (Domain::Source, false) => split.test_source.push(clip),
                    (Domain::Target, true) => split.train_target.push(clip),
                    (Domain::Target, false) => split.test_target.push(clip),
                }
            }
        }
    }
    Ok(split)
}
