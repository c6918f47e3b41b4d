//! Single-level orthonormal 2D Haar analysis and synthesis on feature maps.
//!
//! Each non-overlapping 2x2 block `[[a,b],[c,d]]` maps to
//! `ll=(a+b+c+d)/2, lh=(a+b-c-d)/2, hl=(a-b+c-d)/2, hh=(a-b-c+d)/2`.
//! The transform is orthonormal, so synthesis is the exact inverse and also
//! the adjoint: the backward pass of `dwt2` is `idwt2` applied to the
//! sub-band gradients, and vice versa.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// The four sub-bands of a single-level 2D wavelet analysis, each `[B,C,H/2,W/2]`.
#[derive(Clone, Debug)]
pub struct SubBands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

fn analyze(x: &[f64], planes: usize, h: usize, w: usize) -> [Vec<f64>; 4] {
    let (hh2, wh2) = (h / 2, w / 2);
    let n = planes * hh2 * wh2;
    let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..hh2 {
            for ox in 0..wh2 {
                let q = 2 * oy * w + 2 * ox;
                let (a, b) = (src[q], src[q + 1]);
                let (c, d) = (src[q + w], src[q + w + 1]);
                let i = (p * hh2 + oy) * wh2 + ox;
                out[0][i] = 0.5 * (a + b + c + d);
                out[1][i] = 0.5 * (a + b - c - d);
                out[2][i] = 0.5 * (a - b + c - d);
                out[3][i] = 0.5 * (a - b - c + d);
            }
        }
    }
    out
}

fn synthesize(bands: [&[f64]; 4], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (hh2, wh2) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for oy in 0..hh2 {
            for ox in 0..wh2 {
                let i = (p * hh2 + oy) * wh2 + ox;
                let (ll, lh, hl, hh) = (bands[0][i], bands[1][i], bands[2][i], bands[3][i]);
                let q = 2 * oy * w + 2 * ox;
                dst[q] = 0.5 * (ll + lh + hl + hh);
                dst[q + 1] = 0.5 * (ll + lh - hl - hh);
                dst[q + w] = 0.5 * (ll - lh + hl - hh);
                dst[q + w + 1] = 0.5 * (ll - lh - hl + hh);
            }
        }
    }
    out
}

fn spatial_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch("wavelet transform expects [B,C,H,W]".into()));
    }
    Ok((shape[0] * shape[1], shape[2], shape[3]))
}

/// Orthonormal Haar analysis of `x [B,C,H,W]` with even `H, W`.
pub fn dwt2(tape: &Tape, x: &Tensor) -> Result<SubBands> {
    let (planes, h, w) = spatial_dims(&x.shape)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!("odd spatial extent {}x{}", h, w)));
    }
    let [ll, lh, hl, hh] = analyze(&x.data, planes, h, w);
    let band_shape = vec![x.shape[0], x.shape[1], h / 2, w / 2];
    let band_len = ll.len();
    // Adjoint of analysis: synthesis of the corresponding band gradient
    // with the other three bands zeroed.
    let mk = |band_idx: usize, data: Vec<f64>| {
        let back = move |g: &[f64]| -> Vec<f64> {
            let zero = vec![0.0; band_len];
            let mut bands: [&[f64]; 4] = [&zero, &zero, &zero, &zero];
            bands[band_idx] = g;
            synthesize(bands, planes, h, w)
        };
        tape.make(data, band_shape.clone(), vec![(x.node, Box::new(back))])
    };
    Ok(SubBands { ll: mk(0, ll), lh: mk(1, lh), hl: mk(2, hl), hh: mk(3, hh) })
}

/// Exact inverse of [`dwt2`].
pub fn idwt2(tape: &Tape, bands: &SubBands) -> Result<Tensor> {
    let shape = &bands.ll.shape;
    for (name, b) in [("lh", &bands.lh), ("hl", &bands.hl), ("hh", &bands.hh)] {
        if b.shape != *shape {
            return Err(Error::ShapeMismatch(format!(
                "band {} shape {:?} != ll shape {:?}",
                name, b.shape, shape
            )));
        }
    }
    let (planes, h2, w2) = spatial_dims(shape)?;
    let (h, w) = (h2 * 2, w2 * 2);
    let data = synthesize(
        [&bands.ll.data, &bands.lh.data, &bands.hl.data, &bands.hh.data],
        planes,
        h,
        w,
    );
    let out_shape = vec![shape[0], shape[1], h, w];
    // Adjoint of synthesis: analysis of the gradient, one band per input.
    let deps: Vec<(Option<usize>, _)> = [&bands.ll, &bands.lh, &bands.hl, &bands.hh]
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let back = move |g: &[f64]| -> Vec<f64> {
                let mut out = analyze(g, planes, h, w);
                std::mem::take(&mut out[i])
            };
            (b.node, Box::new(back) as Box<dyn Fn(&[f64]) -> Vec<f64>>)
        })
        .collect();
    Ok(tape.make(data, out_shape, deps))
}
