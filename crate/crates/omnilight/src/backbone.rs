//! Prior-conditioned U-Net backbone.
//!
//! Encoder levels use conditioned residual conv blocks modulated by projected
//! prior features; the bottleneck and every decoder level add a
//! mixture-of-experts branch on top. The network predicts a residual over the
//! input image, and the final conv starts at zero, so the untrained model is
//! the identity map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{sft_modulate, SftParams};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;
use crate::wdmoe::{build_guidance, GateWeights, GuidanceVector, WdMoeModule};

/// Frozen deterministic feature extractor standing in for a pretrained
/// vision encoder: non-overlapping patches projected by a fixed seeded
/// orthonormal matrix, then tanh.
pub struct PriorProvider {
    pub patch: usize,
    pub channels: usize,
    /// Column-orthonormal `[3*p*p, channels]`, row-major.
    proj: Vec<f64>,
}

/// Builds the default provider for a given seed and geometry.
pub fn default_prior(seed: u64, patch: usize, channels: usize) -> PriorProvider {
    let dim = 3 * patch * patch;
    assert!(channels <= dim, "prior channels {} exceed patch dim {}", channels, dim);
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x7072696f72);
    // Random columns made orthonormal by modified Gram-Schmidt.
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(channels);
    while cols.len() < channels {
        let mut c: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for prev in &cols {
            let d: f64 = c.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
            for (ci, pi) in c.iter_mut().zip(prev.iter()) {
                *ci -= d * pi;
            }
        }
        let n: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-8 {
            continue; // degenerate draw, retry
        }
        for v in c.iter_mut() {
            *v /= n;
        }
        cols.push(c);
    }
    let mut proj = vec![0.0; dim * channels];
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            proj[i * channels + j] = *v;
        }
    }
    PriorProvider { patch, channels, proj }
}

impl PriorProvider {
    /// `[B,3,H,W]` -> constant feature map `[B,C,H/p,W/p]`. No gradient.
    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        if image.shape.len() != 4 || image.shape[1] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "prior provider expects [B,3,H,W], got {:?}",
                image.shape
            )));
        }
        let (b, h, w) = (image.shape[0], image.shape[2], image.shape[3]);
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::InvalidArgument(format!(
                "image extents {}x{} not divisible by patch {}",
                h, w, p
            )));
        }
        let (hp, wp) = (h / p, w / p);
        let c = self.channels;
        let dim = 3 * p * p;
        let mut out = vec![0.0; b * c * hp * wp];
        let mut patch_buf = vec![0.0; dim];
        for bi in 0..b {
            for py in 0..hp {
                for px in 0..wp {
                    let mut idx = 0;
                    for ch in 0..3 {
                        for dy in 0..p {
                            let row = (bi * 3 + ch) * h * w + (py * p + dy) * w + px * p;
                            patch_buf[idx..idx + p].copy_from_slice(&image.data[row..row + p]);
                            idx += p;
                        }
                    }
                    for j in 0..c {
                        let mut acc = 0.0;
                        for (i, v) in patch_buf.iter().enumerate() {
                            acc += v * self.proj[i * c + j];
                        }
                        out[(bi * c + j) * hp * wp + py * wp + px] = acc.tanh();
                    }
                }
            }
        }
        let t = Tensor::constant(out, vec![b, c, hp, wp])?;
        if !t.is_finite() {
            return Err(Error::NonFinite("prior features".into()));
        }
        Ok(t)
    }

    /// `Q^T Q` of the projection matrix, for orthonormality checks.
    pub fn gram(&self) -> Vec<f64> {
        let c = self.channels;
        let dim = self.proj.len() / c;
        let mut g = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                let mut acc = 0.0;
                for r in 0..dim {
                    acc += self.proj[r * c + i] * self.proj[r * c + j];
                }
                g[i * c + j] = acc;
            }
        }
        g
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_prior_channels")]
    pub prior_channels: usize,
    #[serde(default = "default_prior_patch")]
    pub prior_patch: usize,
    #[serde(default = "default_blocks_per_level")]
    pub blocks_per_level: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_levels() -> usize {
    3
}
fn default_base_width() -> usize {
    8
}
fn default_prior_channels() -> usize {
    16
}
fn default_prior_patch() -> usize {
    8
}
fn default_blocks_per_level() -> usize {
    1
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: default_levels(),
            base_width: default_base_width(),
            prior_channels: default_prior_channels(),
            prior_patch: default_prior_patch(),
            blocks_per_level: default_blocks_per_level(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if self.base_width < 2 || self.base_width % 2 != 0 {
            return Err(Error::Config(format!(
                "base_width must be even and >= 2, got {}",
                self.base_width
            )));
        }
        if self.blocks_per_level == 0 {
            return Err(Error::Config("blocks_per_level must be >= 1".into()));
        }
        if self.prior_channels == 0 || self.prior_patch == 0 {
            return Err(Error::Config("prior geometry must be nonzero".into()));
        }
        Ok(())
    }

    pub fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn bottleneck_width(&self) -> usize {
        self.width_at(self.levels)
    }

    /// Guidance vector length: pooled bottleneck feature plus pooled prior.
    pub fn guidance_dim(&self) -> usize {
        2 * self.bottleneck_width() + 2 * self.prior_channels
    }

    /// Required spatial divisor: U-Net halvings plus one wavelet halving at
    /// the deepest mixture module.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels + 1)
    }

    pub fn check_extents(&self, h: usize, w: usize) -> Result<()> {
        let d = self.spatial_divisor();
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "input extent {}x{} must be a positive multiple of {}",
                h, w, d
            )));
        }
        if h % self.prior_patch != 0 || w % self.prior_patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "input extent {}x{} not divisible by prior patch {}",
                h, w, self.prior_patch
            )));
        }
        Ok(())
    }

    pub fn provider(&self) -> PriorProvider {
        default_prior(self.seed, self.prior_patch, self.prior_channels)
    }
}

/// Residual conv block conditioned on projected, resized prior features.
#[derive(Clone, Copy, Debug)]
pub struct ConditionedBlock {
    pub width: usize,
    pub prior_channels: usize,
}

impl ConditionedBlock {
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng, prefix: &str) {
        let c = self.width;
        store.add_conv(rng, &format!("{prefix}.cond"), 2 * c, self.prior_channels, 1, 1, false);
        store.add_conv(rng, &format!("{prefix}.conv1"), c, c, 3, 3, false);
        store.add_conv(rng, &format!("{prefix}.conv2"), c, c, 3, 3, false);
    }

    pub fn forward(&self, b: &Binder, prefix: &str, x: &Tensor, prior: &Tensor) -> Result<Tensor> {
        let tape = b.tape;
        let c = self.width;
        let cond = conv(b, &format!("{prefix}.cond"), prior, 1, 0, 1)?;
        let cond = tape.resize_nearest(&cond, x.shape[2], x.shape[3])?;
        let parts = tape.split(&cond, &[c, c], 1)?;
        let t = sft_modulate(
            tape,
            x,
            &SftParams { scale: parts[0].clone(), shift: parts[1].clone() },
        )?;
        let t = conv(b, &format!("{prefix}.conv1"), &t, 1, 1, 1)?;
        let t = conv(b, &format!("{prefix}.conv2"), &tape.gelu(&t), 1, 1, 1)?;
        tape.add(x, &t)
    }
}

/// Dual-branch block: conditioned conv branch modulated by the wavelet-domain
/// mixture-of-experts branch.
#[derive(Clone, Debug)]
pub struct OmniLightBlock {
    pub dino: ConditionedBlock,
    pub wdmoe: WdMoeModule,
}

impl OmniLightBlock {
    pub fn new(width: usize, prior_channels: usize, guidance_dim: usize) -> Self {
        OmniLightBlock {
            dino: ConditionedBlock { width, prior_channels },
            wdmoe: WdMoeModule::new(width, guidance_dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha12Rng, prefix: &str) {
        self.dino.init(store, rng, &format!("{prefix}.dino"));
        self.wdmoe.init(store, rng, &format!("{prefix}.wdmoe"));
    }

    pub fn forward(
        &self,
        b: &Binder,
        prefix: &str,
        x: &Tensor,
        prior: &Tensor,
        v: &GuidanceVector,
    ) -> Result<(Tensor, GateWeights)> {
        let y = self.dino.forward(b, &format!("{prefix}.dino"), x, prior)?;
        let (sft, gates) = self.wdmoe.forward(b, &format!("{prefix}.wdmoe"), x, v)?;
        Ok((sft_modulate(b.tape, &y, &sft)?, gates))
    }
}

fn conv(
    b: &Binder,
    prefix: &str,
    x: &Tensor,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor> {
    b.tape.conv2d(
        x,
        &b.get(&format!("{prefix}.w"))?,
        Some(&b.get(&format!("{prefix}.b"))?),
        stride,
        padding,
        groups,
    )
}

fn blocks(cfg: &ModelConfig) -> (Vec<ConditionedBlock>, Vec<OmniLightBlock>, Vec<OmniLightBlock>) {
    let gd = cfg.guidance_dim();
    let enc = (0..cfg.levels)
        .map(|l| ConditionedBlock { width: cfg.width_at(l), prior_channels: cfg.prior_channels })
        .collect();
    let mid = (0..cfg.blocks_per_level)
        .map(|_| OmniLightBlock::new(cfg.bottleneck_width(), cfg.prior_channels, gd))
        .collect();
    let dec = (0..cfg.levels)
        .map(|l| OmniLightBlock::new(cfg.width_at(l), cfg.prior_channels, gd))
        .collect();
    (enc, mid, dec)
}

/// Builds the full parameter store for a config, deterministically from its
/// seed.
pub fn init_model(cfg: &ModelConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let (enc, mid, dec) = blocks(cfg);

    store.add_conv(&mut rng, "stem", cfg.base_width, 3, 3, 3, false);
    for (l, block) in enc.iter().enumerate() {
        block.init(&mut store, &mut rng, &format!("enc{l}.block"));
        store.add_conv(
            &mut rng,
            &format!("down{l}"),
            cfg.width_at(l + 1),
            cfg.width_at(l),
            3,
            3,
            false,
        );
    }
    for (i, block) in mid.iter().enumerate() {
        block.init(&mut store, &mut rng, &format!("bottleneck{i}"));
    }
    for (l, block) in dec.iter().enumerate().rev() {
        store.add_conv(&mut rng, &format!("dec{l}.up"), cfg.width_at(l), cfg.width_at(l + 1), 1, 1, false);
        store.add_conv(&mut rng, &format!("dec{l}.fuse"), cfg.width_at(l), 2 * cfg.width_at(l), 1, 1, false);
        block.init(&mut store, &mut rng, &format!("dec{l}.block"));
    }
    store.add_conv(&mut rng, "final", 3, cfg.base_width, 3, 3, true);
    Ok(store)
}

/// Forward pass artifacts needed beyond the restored image: gate weights for
/// the auxiliary loss and the guidance vector for routing diagnostics.
pub struct ForwardTrace {
    pub restored: Tensor,
    pub gates: Vec<GateWeights>,
    pub guidance: GuidanceVector,
}

pub fn model_forward_traced(
    cfg: &ModelConfig,
    b: &Binder,
    image: &Tensor,
    provider: &PriorProvider,
) -> Result<ForwardTrace> {
    let prior = provider.features(image)?;
    model_forward_with_prior(cfg, b, image, &prior)
}

/// Forward pass with precomputed prior features; the prior is frozen and
/// carries no gradient, so callers differentiating w.r.t. the image must hold
/// it fixed.
pub fn model_forward_with_prior(
    cfg: &ModelConfig,
    b: &Binder,
    image: &Tensor,
    prior: &Tensor,
) -> Result<ForwardTrace> {
    cfg.validate()?;
    if image.shape.len() != 4 || image.shape[1] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "model input must be [B,3,H,W], got {:?}",
            image.shape
        )));
    }
    cfg.check_extents(image.shape[2], image.shape[3])?;
    let tape = b.tape;
    let prior = prior.clone();

    let mut x = conv(b, "stem", image, 1, 1, 1)?;
    let mut skips = Vec::with_capacity(cfg.levels);
    let (enc, mid, dec) = blocks(cfg);
    for (l, block) in enc.iter().enumerate() {
        x = block.forward(b, &format!("enc{l}.block"), &x, &prior)?;
        skips.push(x.clone());
        x = conv(b, &format!("down{l}"), &x, 2, 1, 1)?;
    }

    let guidance = build_guidance(tape, &x, &prior)?;
    let mut gates = Vec::new();
    for (i, block) in mid.iter().enumerate() {
        let (y, g) = block.forward(b, &format!("bottleneck{i}"), &x, &prior, &guidance)?;
        x = y;
        gates.push(g);
    }

    for (l, block) in dec.iter().enumerate().rev() {
        x = tape.resize_nearest(&x, x.shape[2] * 2, x.shape[3] * 2)?;
        x = conv(b, &format!("dec{l}.up"), &x, 1, 0, 1)?;
        x = tape.concat(&[&x, &skips[l]], 1)?;
        x = conv(b, &format!("dec{l}.fuse"), &x, 1, 0, 1)?;
        let (y, g) = block.forward(b, &format!("dec{l}.block"), &x, &prior, &guidance)?;
        x = y;
        gates.push(g);
    }

    let residual = conv(b, "final", &x, 1, 1, 1)?;
    let restored = tape.add(image, &residual)?;
    tape.check_finite(&restored, "model output")?;
    Ok(ForwardTrace { restored, gates, guidance })
}

pub fn model_forward(
    cfg: &ModelConfig,
    b: &Binder,
    image: &Tensor,
    provider: &PriorProvider,
) -> Result<Tensor> {
    Ok(model_forward_traced(cfg, b, image, provider)?.restored)
}
