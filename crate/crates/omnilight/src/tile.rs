//! Sliding-window tiled inference with seamless blending.
//!
//! The image is reflect-padded to the model's divisibility constraint,
//! covered by fixed-size tiles at a stride derived from the overlap ratio,
//! and each restored tile is accumulated under a separable raised-cosine
//! weight profile. Dividing by the accumulated weight normalizes the blend
//! to a partition of unity, so any overlap ratio is seam-free.

use crate::backbone::{model_forward, ModelConfig, PriorProvider};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug)]
pub struct TilePlan {
    pub tile_h: usize,
    pub tile_w: usize,
    pub overlap_ratio: f64,
    pub orig_h: usize,
    pub orig_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    /// Tile origins (y, x) in the padded image.
    pub tiles: Vec<(usize, usize)>,
    /// Separable per-tile weight profile, strictly positive.
    pub ramp_y: Vec<f64>,
    pub ramp_x: Vec<f64>,
}

fn round_up(v: usize, to: usize) -> usize {
    v.div_ceil(to) * to
}

fn axis_origins(padded: usize, tile: usize, stride: usize) -> Vec<usize> {
    if padded <= tile {
        return vec![0];
    }
    let mut o = Vec::new();
    let mut y = 0;
    while y + tile < padded {
        o.push(y);
        y += stride;
    }
    let last = padded - tile;
    if o.last() != Some(&last) {
        o.push(last);
    }
    o
}

/// Raised-cosine ramp over the overlap margin, flat interior. Strictly
/// positive everywhere so the accumulated weight never vanishes.
fn raised_cosine(tile: usize, margin: usize) -> Vec<f64> {
    let mut w = vec![1.0; tile];
    for t in 0..margin.min(tile / 2) {
        let v = 0.5 - 0.5 * (std::f64::consts::PI * (t + 1) as f64 / (margin + 1) as f64).cos();
        w[t] = v;
        w[tile - 1 - t] = v;
    }
    w
}

/// Plans the tiling of an `orig_h x orig_w` image. `tile` must satisfy the
/// model's divisibility constraint (`divisor`); images smaller than a tile
/// degenerate to a single whole-image tile.
pub fn plan_tiles(
    orig_h: usize,
    orig_w: usize,
    tile: usize,
    overlap_ratio: f64,
    divisor: usize,
) -> Result<TilePlan> {
    if !(0.0..1.0).contains(&overlap_ratio) {
        return Err(Error::InvalidArgument(format!(
            "overlap ratio {} outside [0,1)",
            overlap_ratio
        )));
    }
    if tile == 0 || tile % divisor != 0 {
        return Err(Error::InvalidArgument(format!(
            "tile {} must be a positive multiple of {}",
            tile, divisor
        )));
    }
    if orig_h == 0 || orig_w == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let padded_h = round_up(orig_h, divisor);
    let padded_w = round_up(orig_w, divisor);
    let tile_h = tile.min(padded_h);
    let tile_w = tile.min(padded_w);
    let stride_h = ((tile_h as f64 * (1.0 - overlap_ratio)).round() as usize).max(1);
    let stride_w = ((tile_w as f64 * (1.0 - overlap_ratio)).round() as usize).max(1);
    let ys = axis_origins(padded_h, tile_h, stride_h);
    let xs = axis_origins(padded_w, tile_w, stride_w);
    let mut tiles = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            tiles.push((y, x));
        }
    }
    let margin_h = if ys.len() > 1 { tile_h - stride_h.min(tile_h) } else { 0 };
    let margin_w = if xs.len() > 1 { tile_w - stride_w.min(tile_w) } else { 0 };
    Ok(TilePlan {
        tile_h,
        tile_w,
        overlap_ratio,
        orig_h,
        orig_w,
        padded_h,
        padded_w,
        tiles,
        ramp_y: raised_cosine(tile_h, margin_h),
        ramp_x: raised_cosine(tile_w, margin_w),
    })
}

impl TilePlan {
    /// Accumulated raw blend weight per padded pixel; after normalization
    /// the per-tile weights sum to exactly 1 wherever this is positive.
    pub fn weight_sum(&self) -> Vec<f64> {
        let mut den = vec![0.0; self.padded_h * self.padded_w];
        for &(oy, ox) in &self.tiles {
            for ty in 0..self.tile_h {
                let wy = self.ramp_y[ty];
                let row = (oy + ty) * self.padded_w + ox;
                for tx in 0..self.tile_w {
                    den[row + tx] += wy * self.ramp_x[tx];
                }
            }
        }
        den
    }
}

fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

/// Reflect-pads a `[3,H,W]` image on the bottom/right to the target extents.
pub fn reflect_pad(image: &Tensor, ph: usize, pw: usize) -> Result<Tensor> {
    if image.shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "reflect_pad expects [C,H,W], got {:?}",
            image.shape
        )));
    }
    let (c, h, w) = (image.shape[0], image.shape[1], image.shape[2]);
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..ph {
            let sy = mirror(y, h);
            for x in 0..pw {
                out[ch * ph * pw + y * pw + x] = image.data[ch * h * w + sy * w + mirror(x, w)];
            }
        }
    }
    Tensor::constant(out, vec![c, ph, pw])
}

/// Restores a `[3,H,W]` image tile by tile. Output values are clamped to
/// [0,1] unless `clamp` is false (useful for exactness checks).
pub fn tiled_infer_with(
    cfg: &ModelConfig,
    store: &ParamStore,
    provider: &PriorProvider,
    image: &Tensor,
    plan: &TilePlan,
    clamp: bool,
) -> Result<Tensor> {
    if image.shape != [3, plan.orig_h, plan.orig_w] {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} does not match plan {}x{}",
            image.shape, plan.orig_h, plan.orig_w
        )));
    }
    let padded = reflect_pad(image, plan.padded_h, plan.padded_w)?;
    let (ph, pw) = (plan.padded_h, plan.padded_w);
    let (th, tw) = (plan.tile_h, plan.tile_w);
    let mut num = vec![0.0; 3 * ph * pw];
    let mut den = vec![0.0; ph * pw];

    for &(oy, ox) in &plan.tiles {
        let mut tile = vec![0.0; 3 * th * tw];
        for c in 0..3 {
            for ty in 0..th {
                let src = c * ph * pw + (oy + ty) * pw + ox;
                let dst = c * th * tw + ty * tw;
                tile[dst..dst + tw].copy_from_slice(&padded.data[src..src + tw]);
            }
        }
        let input = Tensor::constant(tile, vec![1, 3, th, tw])?;
        let tape = Tape::new();
        let b = Binder::inference(&tape, store);
        let out = model_forward(cfg, &b, &input, provider)?;

        for ty in 0..th {
            let wy = plan.ramp_y[ty];
            for tx in 0..tw {
                let wgt = wy * plan.ramp_x[tx];
                let pix = (oy + ty) * pw + ox + tx;
                den[pix] += wgt;
                for c in 0..3 {
                    num[c * ph * pw + pix] += wgt * out.data[c * th * tw + ty * tw + tx];
                }
            }
        }
    }

    let (h, w) = (plan.orig_h, plan.orig_w);
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let pix = y * pw + x;
                let v = num[c * ph * pw + pix] / den[pix];
                out[c * h * w + y * w + x] = if clamp { v.clamp(0.0, 1.0) } else { v };
            }
        }
    }
    Tensor::constant(out, vec![3, h, w])
}

pub fn tiled_infer(
    cfg: &ModelConfig,
    store: &ParamStore,
    image: &Tensor,
    plan: &TilePlan,
) -> Result<Tensor> {
    let provider = cfg.provider();
    tiled_infer_with(cfg, store, &provider, image, plan, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            levels: 2,
            base_width: 4,
            prior_channels: 8,
            prior_patch: 4,
            blocks_per_level: 1,
            seed: 13,
        }
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::constant(
            (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
            vec![3, h, w],
        )
        .unwrap()
    }

    #[test]
    fn degenerate_single_tile() {
        let plan = plan_tiles(32, 32, 64, 0.5, 8).unwrap();
        assert_eq!(plan.tiles, vec![(0, 0)]);
        assert_eq!((plan.tile_h, plan.tile_w), (32, 32));
        assert!(plan.ramp_y.iter().all(|v| *v == 1.0));
        assert!(plan.ramp_x.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn hand_planned_grid() {
        let plan = plan_tiles(96, 96, 64, 0.5, 16).unwrap();
        assert_eq!(plan.padded_h, 96);
        let mut tiles = plan.tiles.clone();
        tiles.sort_unstable();
        assert_eq!(tiles, vec![(0, 0), (0, 32), (32, 0), (32, 32)]);
    }

    #[test]
    fn blend_normalizes_to_partition_of_unity() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..20 {
            let h = rng.gen_range(40..200);
            let w = rng.gen_range(40..200);
            let overlap = [0.0, 0.25, 0.5, 0.75][rng.gen_range(0..4)];
            let plan = plan_tiles(h, w, 64, overlap, 16).unwrap();
            let den = plan.weight_sum();
            assert!(den.iter().all(|v| *v > 1e-9), "{}x{} overlap {}", h, w, overlap);
            // Re-accumulate the normalized weights tile by tile and check
            // they sum to 1 at every pixel.
            let mut norm = vec![0.0; plan.padded_h * plan.padded_w];
            for &(oy, ox) in &plan.tiles {
                for ty in 0..plan.tile_h {
                    for tx in 0..plan.tile_w {
                        let pix = (oy + ty) * plan.padded_w + ox + tx;
                        norm[pix] += plan.ramp_y[ty] * plan.ramp_x[tx] / den[pix];
                    }
                }
            }
            let err = norm.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-6, "partition error {}", err);
        }
    }

    #[test]
    fn reflect_pad_mirrors() {
        let img =
            Tensor::constant((0..9).map(|i| i as f64).collect(), vec![1, 3, 3]).unwrap();
        let p = reflect_pad(&img, 5, 5).unwrap();
        // Mirror without edge repeat: index sequence 0 1 2 1 0.
        let expect = [
            0.0, 1.0, 2.0, 1.0, 0.0, //
            3.0, 4.0, 5.0, 4.0, 3.0, //
            6.0, 7.0, 8.0, 7.0, 6.0, //
            3.0, 4.0, 5.0, 4.0, 3.0, //
            0.0, 1.0, 2.0, 1.0, 0.0,
        ];
        assert_eq!(&p.data[..], &expect[..]);
    }

    #[test]
    fn single_tile_equals_direct_forward() {
        let cfg = micro_cfg();
        let mut store = init_model(&cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for (_, p) in store.iter_mut() {
            for v in p.data.iter_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        let img = random_image(4, 32, 32);
        let plan = plan_tiles(32, 32, 32, 0.25, cfg.spatial_divisor()).unwrap();
        assert_eq!(plan.tiles.len(), 1);
        let provider = cfg.provider();
        let tiled = tiled_infer_with(&cfg, &store, &provider, &img, &plan, false).unwrap();

        let tape = Tape::new();
        let b = Binder::inference(&tape, &store);
        let input = Tensor::constant(img.data.as_ref().clone(), vec![1, 3, 32, 32]).unwrap();
        let direct = model_forward(&cfg, &b, &input, &provider).unwrap();
        for (a, d) in tiled.data.iter().zip(direct.data.iter()) {
            assert!((a - d).abs() <= 1e-12);
        }
    }

    #[test]
    fn identity_model_survives_any_tiling() {
        let cfg = micro_cfg();
        let store = init_model(&cfg).unwrap();
        let img = random_image(5, 50, 70);
        for overlap in [0.0, 0.25, 0.75] {
            let plan = plan_tiles(50, 70, 32, overlap, cfg.spatial_divisor()).unwrap();
            let out = tiled_infer(&cfg, &store, &img, &plan).unwrap();
            let err = out
                .data
                .iter()
                .zip(img.data.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-10, "overlap {} err {}", overlap, err);
        }
    }

    #[test]
    fn overlap_increases_tile_count() {
        let none = plan_tiles(256, 256, 64, 0.0, 16).unwrap().tiles.len();
        let high = plan_tiles(256, 256, 64, 0.75, 16).unwrap().tiles.len();
        assert!(high > none, "{} vs {}", high, none);
    }
}
