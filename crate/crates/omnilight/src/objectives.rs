//! Losses and fidelity metrics: L1, MS-SSIM, the composite training
//! objective, PSNR, and single-scale SSIM.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use crate::wdmoe::{load_balance_loss, GateWeights};

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.25, beta: 0.01 }
    }
}

#[derive(Clone, Debug)]
pub struct MsSsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub scale_weights: [f64; 5],
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        MsSsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            scale_weights: [0.0448, 0.2856, 0.3001, 0.2363, 0.1333],
        }
    }
}

impl MsSsimConfig {
    /// Number of usable scales m: min(H,W)/2^(m-1) must still fit the window.
    pub fn usable_scales(&self, h: usize, w: usize) -> Result<usize> {
        let mut m = 0usize;
        let mut ext = h.min(w);
        while m < 5 && ext >= self.window {
            m += 1;
            ext /= 2;
        }
        if m == 0 {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} smaller than SSIM window {}",
                h, w, self.window
            )));
        }
        Ok(m)
    }

    /// First m weights, renormalized to sum 1.
    pub fn weights_for(&self, scales: usize) -> Vec<f64> {
        let ws = &self.scale_weights[..scales];
        let sum: f64 = ws.iter().sum();
        ws.iter().map(|w| w / sum).collect()
    }

    fn gaussian_1d(&self) -> Vec<f64> {
        let c = (self.window - 1) as f64 / 2.0;
        let mut k: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - c;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        k
    }
}

/// Mean absolute difference.
pub fn l1_loss(tape: &Tape, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape != target.shape {
        return Err(Error::ShapeMismatch(format!(
            "l1 shapes {:?} vs {:?}",
            pred.shape, target.shape
        )));
    }
    let d = tape.sub(pred, target)?;
    Ok(tape.mean_all(&tape.abs(&d)))
}

/// Gaussian-windowed local mean via separable depthwise convolution,
/// valid padding.
fn gaussian_blur(tape: &Tape, x: &Tensor, kernel: &[f64]) -> Result<Tensor> {
    let c = x.shape[1];
    let win = kernel.len();
    let mut row = Vec::with_capacity(c * win);
    for _ in 0..c {
        row.extend_from_slice(kernel);
    }
    let wrow = Tensor::constant(row.clone(), vec![c, 1, 1, win])?;
    let wcol = Tensor::constant(row, vec![c, 1, win, 1])?;
    let h = tape.conv2d(x, &wrow, None, 1, 0, c)?;
    tape.conv2d(&h, &wcol, None, 1, 0, c)
}

struct SsimTerms {
    luminance: Tensor,
    contrast_structure: Tensor,
}

/// Mean luminance and contrast-structure terms at a single scale.
fn ssim_scale(tape: &Tape, x: &Tensor, y: &Tensor, cfg: &MsSsimConfig) -> Result<SsimTerms> {
    let l = cfg.dynamic_range;
    let c1 = (cfg.k1 * l) * (cfg.k1 * l);
    let c2 = (cfg.k2 * l) * (cfg.k2 * l);
    let kernel = cfg.gaussian_1d();
    let mu_x = gaussian_blur(tape, x, &kernel)?;
    let mu_y = gaussian_blur(tape, y, &kernel)?;
    let xx = gaussian_blur(tape, &tape.mul(x, x)?, &kernel)?;
    let yy = gaussian_blur(tape, &tape.mul(y, y)?, &kernel)?;
    let xy = gaussian_blur(tape, &tape.mul(x, y)?, &kernel)?;
    let mu_xx = tape.mul(&mu_x, &mu_x)?;
    let mu_yy = tape.mul(&mu_y, &mu_y)?;
    let mu_xy = tape.mul(&mu_x, &mu_y)?;
    let var_x = tape.sub(&xx, &mu_xx)?;
    let var_y = tape.sub(&yy, &mu_yy)?;
    let cov = tape.sub(&xy, &mu_xy)?;

    let lum_num = tape.affine(&tape.scale(&mu_xy, 2.0), 1.0, c1);
    let lum_den = tape.affine(&tape.add(&mu_xx, &mu_yy)?, 1.0, c1);
    let lum = tape.div(&lum_num, &lum_den)?;

    let cs_num = tape.affine(&tape.scale(&cov, 2.0), 1.0, c2);
    let cs_den = tape.affine(&tape.add(&var_x, &var_y)?, 1.0, c2);
    let cs = tape.div(&cs_num, &cs_den)?;

    Ok(SsimTerms { luminance: tape.mean_all(&lum), contrast_structure: tape.mean_all(&cs) })
}

/// Multi-scale structural similarity in [0,1] for inputs in [0,1].
/// Contrast-structure at every scale, luminance only at the coarsest,
/// combined as a product with exponent weights.
pub fn ms_ssim(tape: &Tape, pred: &Tensor, target: &Tensor, cfg: &MsSsimConfig) -> Result<Tensor> {
    if pred.shape != target.shape {
        return Err(Error::ShapeMismatch(format!(
            "ms_ssim shapes {:?} vs {:?}",
            pred.shape, target.shape
        )));
    }
    if pred.shape.len() != 4 {
        return Err(Error::ShapeMismatch("ms_ssim expects [B,C,H,W]".into()));
    }
    let (h, w) = (pred.shape[2], pred.shape[3]);
    let scales = cfg.usable_scales(h, w)?;
    let weights = cfg.weights_for(scales);
    let mut x = pred.clone();
    let mut y = target.clone();
    let mut product: Option<Tensor> = None;
    for (s, &wt) in weights.iter().enumerate() {
        let terms = ssim_scale(tape, &x, &y, cfg)?;
        let factor = if s + 1 == scales {
            let lc = tape.mul(&terms.luminance, &terms.contrast_structure)?;
            tape.powf_const(&tape.max_const(&lc, 1e-12), wt)
        } else {
            tape.powf_const(&tape.max_const(&terms.contrast_structure, 1e-12), wt)
        };
        product = Some(match product {
            Some(p) => tape.mul(&p, &factor)?,
            None => factor,
        });
        if s + 1 < scales {
            x = tape.avgpool2x2(&x)?;
            y = tape.avgpool2x2(&y)?;
        }
    }
    Ok(product.expect("at least one scale"))
}

pub fn ms_ssim_loss(tape: &Tape, pred: &Tensor, target: &Tensor, cfg: &MsSsimConfig) -> Result<Tensor> {
    let v = ms_ssim(tape, pred, target, cfg)?;
    Ok(tape.affine(&v, -1.0, 1.0))
}

/// Single-scale SSIM at the finest scale, luminance included.
pub fn ssim_single(tape: &Tape, pred: &Tensor, target: &Tensor, cfg: &MsSsimConfig) -> Result<Tensor> {
    if pred.shape != target.shape {
        return Err(Error::ShapeMismatch(format!(
            "ssim shapes {:?} vs {:?}",
            pred.shape, target.shape
        )));
    }
    let l = cfg.dynamic_range;
    let c1 = (cfg.k1 * l) * (cfg.k1 * l);
    let c2 = (cfg.k2 * l) * (cfg.k2 * l);
    let kernel = cfg.gaussian_1d();
    let mu_x = gaussian_blur(tape, pred, &kernel)?;
    let mu_y = gaussian_blur(tape, target, &kernel)?;
    let xx = gaussian_blur(tape, &tape.mul(pred, pred)?, &kernel)?;
    let yy = gaussian_blur(tape, &tape.mul(target, target)?, &kernel)?;
    let xy = gaussian_blur(tape, &tape.mul(pred, target)?, &kernel)?;
    let mu_xx = tape.mul(&mu_x, &mu_x)?;
    let mu_yy = tape.mul(&mu_y, &mu_y)?;
    let mu_xy = tape.mul(&mu_x, &mu_y)?;
    let num = tape.mul(
        &tape.affine(&tape.scale(&mu_xy, 2.0), 1.0, c1),
        &tape.affine(&tape.scale(&tape.sub(&xy, &mu_xy)?, 2.0), 1.0, c2),
    )?;
    let den = tape.mul(
        &tape.affine(&tape.add(&mu_xx, &mu_yy)?, 1.0, c1),
        &tape.affine(
            &tape.sub(&tape.add(&xx, &yy)?, &tape.add(&mu_xx, &mu_yy)?)?,
            1.0,
            c2,
        ),
    )?;
    Ok(tape.mean_all(&tape.div(&num, &den)?))
}

/// Scalar composition of already-evaluated loss components.
pub fn combine_components(l1: f64, ms_ssim_loss: f64, aux: f64, w: &LossWeights) -> f64 {
    l1 + w.alpha * ms_ssim_loss + w.beta * aux
}

/// L1 + alpha * (1 - MS-SSIM) + beta * load-balance, on the tape.
pub fn total_loss(
    tape: &Tape,
    pred: &Tensor,
    target: &Tensor,
    gates: &[GateWeights],
    w: &LossWeights,
    cfg: &MsSsimConfig,
) -> Result<Tensor> {
    let l1 = l1_loss(tape, pred, target)?;
    let msl = ms_ssim_loss(tape, pred, target, cfg)?;
    let mut total = tape.add(&l1, &tape.scale(&msl, w.alpha))?;
    if w.beta != 0.0 && !gates.is_empty() {
        let aux = load_balance_loss(tape, gates)?;
        total = tape.add(&total, &tape.scale(&aux, w.beta))?;
    }
    Ok(total)
}

/// Peak signal-to-noise ratio in dB, capped at 100 when MSE < 1e-10.
pub fn psnr(pred: &[f64], target: &[f64], peak: f64) -> f64 {
    assert_eq!(pred.len(), target.len());
    let mse: f64 =
        pred.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            / pred.len() as f64;
    if mse < 1e-10 {
        100.0
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}
