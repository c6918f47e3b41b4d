//! Softmax over the last dimension and channel-wise layer normalization.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

impl Tape {
    /// Row-wise softmax over the last dimension, max-subtracted for stability.
    pub fn softmax_lastdim(&self, x: &Tensor) -> Result<Tensor> {
        self.check_finite(x, "softmax input")?;
        let n = *x.shape.last().ok_or_else(|| Error::ShapeMismatch("softmax on rank 0".into()))?;
        let rows = x.numel() / n;
        let mut data = vec![0.0; x.numel()];
        for r in 0..rows {
            let src = &x.data[r * n..(r + 1) * n];
            let dst = &mut data[r * n..(r + 1) * n];
            let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (d, &v) in dst.iter_mut().zip(src.iter()) {
                *d = (v - m).exp();
                sum += *d;
            }
            let inv = 1.0 / sum;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let y = data.clone();
        let back = move |g: &[f64]| -> Vec<f64> {
            // dx = y * (g - sum(g * y)) per row
            let mut dx = vec![0.0; g.len()];
            for r in 0..rows {
                let yr = &y[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                for i in 0..n {
                    dx[r * n + i] = yr[i] * (gr[i] - dot);
                }
            }
            dx
        };
        Ok(self.make(data, x.shape.clone(), vec![(x.node, Box::new(back))]))
    }

    /// Per-(b,h,w) position, normalizes the channel vector of `x [B,C,H,W]`
    /// to zero mean / unit variance, then applies the affine `gamma, beta [C]`.
    /// Zero-variance positions yield zeros before the affine (eps clamp).
    pub fn layer_norm_channels(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        if x.shape.len() != 4 {
            return Err(Error::ShapeMismatch("layer_norm_channels expects [B,C,H,W]".into()));
        }
        let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        if gamma.shape != [c] || beta.shape != [c] {
            return Err(Error::ShapeMismatch(format!(
                "gamma/beta shape must be [{}], got {:?}/{:?}",
                c, gamma.shape, beta.shape
            )));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("eps must be positive".into()));
        }
        let plane = h * w;
        let n_pos = b * plane;
        let mut data = vec![0.0; x.numel()];
        // Cache of per-position mean and 1/sqrt(var+eps) for the backward pass.
        let mut means = vec![0.0; n_pos];
        let mut inv_stds = vec![0.0; n_pos];
        for bi in 0..b {
            for pos in 0..plane {
                let base = bi * c * plane + pos;
                let mut mean = 0.0;
                for ci in 0..c {
                    mean += x.data[base + ci * plane];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = x.data[base + ci * plane] - mean;
                    var += d * d;
                }
                var /= c as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                means[bi * plane + pos] = mean;
                inv_stds[bi * plane + pos] = inv_std;
                for ci in 0..c {
                    let xhat = (x.data[base + ci * plane] - mean) * inv_std;
                    data[base + ci * plane] = gamma.data[ci] * xhat + beta.data[ci];
                }
            }
        }

        let xd = x.data.clone();
        let gd = gamma.data.clone();
        let (means2, inv2) = (means.clone(), inv_stds.clone());
        let xd2 = x.data.clone();
        let deps: Vec<(Option<usize>, super::Vjp)> = vec![
            (
                x.node,
                Box::new(move |g: &[f64]| {
                    let mut dx = vec![0.0; g.len()];
                    let cf = c as f64;
                    for bi in 0..b {
                        for pos in 0..plane {
                            let base = bi * c * plane + pos;
                            let mean = means[bi * plane + pos];
                            let inv_std = inv_stds[bi * plane + pos];
                            // dy_hat = g * gamma; standard layernorm backward
                            let mut sum_dyh = 0.0;
                            let mut sum_dyh_xhat = 0.0;
                            for ci in 0..c {
                                let xhat = (xd[base + ci * plane] - mean) * inv_std;
                                let dyh = g[base + ci * plane] * gd[ci];
                                sum_dyh += dyh;
                                sum_dyh_xhat += dyh * xhat;
                            }
                            for ci in 0..c {
                                let xhat = (xd[base + ci * plane] - mean) * inv_std;
                                let dyh = g[base + ci * plane] * gd[ci];
                                dx[base + ci * plane] = inv_std
                                    * (dyh - sum_dyh / cf - xhat * sum_dyh_xhat / cf);
                            }
                        }
                    }
                    dx
                }),
            ),
            (
                gamma.node,
                Box::new(move |g: &[f64]| {
                    let mut dg = vec![0.0; c];
                    for bi in 0..b {
                        for pos in 0..plane {
                            let base = bi * c * plane + pos;
                            let mean = means2[bi * plane + pos];
                            let inv_std = inv2[bi * plane + pos];
                            for (ci, d) in dg.iter_mut().enumerate() {
                                let xhat = (xd2[base + ci * plane] - mean) * inv_std;
                                *d += g[base + ci * plane] * xhat;
                            }
                        }
                    }
                    dg
                }),
            ),
            (
                beta.node,
                Box::new(move |g: &[f64]| {
                    let mut db = vec![0.0; c];
                    for bi in 0..b {
                        for pos in 0..plane {
                            let base = bi * c * plane + pos;
                            for (ci, d) in db.iter_mut().enumerate() {
                                *d += g[base + ci * plane];
                            }
                        }
                    }
                    db
                }),
            ),
        ];
        Ok(self.make(data, x.shape.clone(), deps))
    }
}
