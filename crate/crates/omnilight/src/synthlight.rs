//! Deterministic synthetic paired data for the three lighting tasks.
//!
//! Clean images are procedural scenes (soft-edged shapes over a smooth
//! color gradient with faint texture). Degradations are multiplicative and
//! positive: shadow masks with smoothstep penumbras, and smooth cosine-basis
//! gain fields, channel-shared for white-light normalization and per-channel
//! for color casts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    Shadow,
    WhiteAln,
    ColorAln,
}

pub const ALL_TASKS: [Task; 3] = [Task::Shadow, Task::WhiteAln, Task::ColorAln];

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Shadow => "shadow",
            Task::WhiteAln => "white_aln",
            Task::ColorAln => "color_aln",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "shadow" => Ok(Task::Shadow),
            "white_aln" => Ok(Task::WhiteAln),
            "color_aln" => Ok(Task::ColorAln),
            other => Err(Error::InvalidArgument(format!("unknown task '{}'", other))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    /// `[3,H,W]` in [0,1].
    pub clean: Tensor,
    /// `[3,H,W]` in [0,1].
    pub degraded: Tensor,
    pub task: Task,
    pub seed: u64,
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    if e1 <= e0 {
        return if x < e0 { 0.0 } else { 1.0 };
    }
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Procedural clean scene: 2-5 soft shapes over a two-color gradient plus
/// low-amplitude texture, values within [0.05, 0.95].
pub fn make_clean(seed: u64, h: usize, w: usize) -> Tensor {
    assert!(h >= 32 && w >= 32, "clean images must be at least 32x32");
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));

    let c0: [f64; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let c1: [f64; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());

    struct Shape {
        ellipse: bool,
        cx: f64,
        cy: f64,
        sx: f64,
        sy: f64,
        edge: f64,
        color: [f64; 3],
    }
    let n_shapes = rng.gen_range(2..=5);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| Shape {
            ellipse: rng.gen_bool(0.5),
            cx: rng.gen_range(0.1..0.9),
            cy: rng.gen_range(0.1..0.9),
            sx: rng.gen_range(0.08..0.35),
            sy: rng.gen_range(0.08..0.35),
            edge: rng.gen_range(0.05..0.25),
            color: [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
        })
        .collect();

    let tex_amp = 0.02;
    let (tfx, tfy, tph): (f64, f64, f64) =
        (rng.gen_range(2.0..6.0), rng.gen_range(2.0..6.0), rng.gen_range(0.0..std::f64::consts::TAU));

    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        let fy = y as f64 / (h - 1) as f64;
        for x in 0..w {
            let fx = x as f64 / (w - 1) as f64;
            // Background gradient along a random direction.
            let t = ((fx - 0.5) * dx + (fy - 0.5) * dy + 0.5).clamp(0.0, 1.0);
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = c0[c] + (c1[c] - c0[c]) * t;
            }
            for s in &shapes {
                let rx = (fx - s.cx) / s.sx;
                let ry = (fy - s.cy) / s.sy;
                let d = if s.ellipse { (rx * rx + ry * ry).sqrt() } else { rx.abs().max(ry.abs()) };
                let alpha = 1.0 - smoothstep(1.0, 1.0 + s.edge, d);
                for c in 0..3 {
                    px[c] += alpha * (s.color[c] - px[c]);
                }
            }
            let tex = tex_amp
                * (std::f64::consts::PI * (tfx * fx + tfy * fy) + tph).cos();
            for c in 0..3 {
                data[c * h * w + y * w + x] = (px[c] + tex).clamp(0.05, 0.95);
            }
        }
    }
    Tensor::constant(data, vec![3, h, w]).unwrap()
}

/// Smooth low-order cosine-basis field over the unit square, `base` plus a
/// random combination whose absolute coefficients sum to `amp`, clamped to
/// `[lo, hi]`.
fn cosine_field(rng: &mut ChaCha12Rng, h: usize, w: usize, base: f64, amp: f64, lo: f64, hi: f64) -> Vec<f64> {
    let mut coeffs = [[0.0f64; 3]; 3];
    let mut total = 0.0;
    for (i, row) in coeffs.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            if i == 0 && j == 0 {
                continue;
            }
            *c = rng.gen_range(-1.0..1.0);
            total += c.abs();
        }
    }
    let norm = amp / total.max(1e-12);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / (h - 1) as f64;
        for x in 0..w {
            let fx = x as f64 / (w - 1) as f64;
            let mut v = base;
            for (i, row) in coeffs.iter().enumerate() {
                for (j, c) in row.iter().enumerate() {
                    if i == 0 && j == 0 {
                        continue;
                    }
                    v += c * norm
                        * (std::f64::consts::PI * i as f64 * fx).cos()
                        * (std::f64::consts::PI * j as f64 * fy).cos();
                }
            }
            out[y * w + x] = v.clamp(lo, hi);
        }
    }
    out
}

/// Shadow mask in [0.25, 1]: 1-2 half-plane shadows with smoothstep penumbra,
/// combined by the darkest value.
fn shadow_mask(rng: &mut ChaCha12Rng, h: usize, w: usize) -> Vec<f64> {
    let n = rng.gen_range(1..=2);
    let mut mask = vec![1.0; h * w];
    for _ in 0..n {
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (nx, ny) = (phi.cos(), phi.sin());
        let offset: f64 = rng.gen_range(0.15..0.85);
        let pen: f64 = rng.gen_range(0.03..0.15);
        let dark: f64 = rng.gen_range(0.25..0.7);
        for y in 0..h {
            let fy = y as f64 / (h - 1) as f64;
            for x in 0..w {
                let fx = x as f64 / (w - 1) as f64;
                // Projection in [~-0.7, ~1.7]; lit side where it exceeds
                // offset + penumbra.
                let proj = (fx - 0.5) * nx + (fy - 0.5) * ny + 0.5;
                let m = dark + (1.0 - dark) * smoothstep(offset, offset + pen, proj);
                let cell = &mut mask[y * w + x];
                *cell = f64::min(*cell, m);
            }
        }
    }
    mask
}

/// Applies a multiplicative degradation; exactly reproducible from
/// (task, seed).
pub fn apply_degradation(clean: &Tensor, task: Task, seed: u64) -> Result<Tensor> {
    if clean.shape.len() != 3 || clean.shape[0] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected clean image [3,H,W], got {:?}",
            clean.shape
        )));
    }
    let (h, w) = (clean.shape[1], clean.shape[2]);
    let mix = match task {
        Task::Shadow => 0x73,
        Task::WhiteAln => 0x77,
        Task::ColorAln => 0x63,
    };
    let mut rng =
        ChaCha12Rng::seed_from_u64(seed.wrapping_mul(0x2545f4914f6cdd1d).wrapping_add(mix));
    let mut out = vec![0.0; 3 * h * w];
    match task {
        Task::Shadow => {
            let mask = shadow_mask(&mut rng, h, w);
            for c in 0..3 {
                for (i, m) in mask.iter().enumerate() {
                    out[c * h * w + i] = (clean.data[c * h * w + i] * m).clamp(0.0, 1.0);
                }
            }
        }
        Task::WhiteAln => {
            let gain = cosine_field(&mut rng, h, w, 0.85, 0.55, 0.3, 1.4);
            for c in 0..3 {
                for (i, g) in gain.iter().enumerate() {
                    out[c * h * w + i] = (clean.data[c * h * w + i] * g).clamp(0.0, 1.0);
                }
            }
        }
        Task::ColorAln => {
            for c in 0..3 {
                let gain = cosine_field(&mut rng, h, w, 1.0, 0.6, 0.4, 1.6);
                for (i, g) in gain.iter().enumerate() {
                    out[c * h * w + i] = (clean.data[c * h * w + i] * g).clamp(0.0, 1.0);
                }
            }
        }
    }
    Tensor::constant(out, vec![3, h, w])
}

/// Balanced dataset: `3 * n_per_task` samples in stable (shadow, white,
/// color) rotation, with per-sample seeds `base_seed + index`.
pub fn make_dataset(n_per_task: usize, h: usize, w: usize, base_seed: u64) -> Vec<SyntheticSample> {
    assert!(n_per_task >= 1);
    (0..3 * n_per_task)
        .map(|idx| {
            let task = ALL_TASKS[idx % 3];
            let seed = base_seed + idx as u64;
            let clean = make_clean(seed, h, w);
            let degraded = apply_degradation(&clean, task, seed).unwrap();
            SyntheticSample { clean, degraded, task, seed }
        })
        .collect()
}

/// Single-task dataset with the same seeding scheme (stage-1 training data).
pub fn make_task_dataset(
    task: Task,
    n: usize,
    h: usize,
    w: usize,
    base_seed: u64,
) -> Vec<SyntheticSample> {
    assert!(n >= 1);
    (0..n)
        .map(|idx| {
            let seed = base_seed + idx as u64;
            let clean = make_clean(seed, h, w);
            let degraded = apply_degradation(&clean, task, seed).unwrap();
            SyntheticSample { clean, degraded, task, seed }
        })
        .collect()
}
