//! 2D convolution with zero padding, stride, and grouping (depthwise and
//! pointwise included). Direct loops, ordered so the innermost loop runs
//! contiguously along the width axis.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct Conv2dSpec {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dSpec {
    fn resolve(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::ShapeMismatch("conv2d expects [B,C,H,W] and [Co,Ci/g,kh,kw]".into()));
        }
        let (batch, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (cout, cin_g, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!("even kernel {}x{}", kh, kw)));
        }
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "group count {} does not divide channels {}/{}",
                groups, cin, cout
            )));
        }
        if cin_g != cin / groups {
            return Err(Error::ShapeMismatch(format!(
                "weight in-channels {} != {}/{}",
                cin_g, cin, groups
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride 0".into()));
        }
        let hp = h + 2 * padding;
        let wp = w + 2 * padding;
        if hp < kh || wp < kw {
            return Err(Error::InvalidArgument(format!(
                "non-positive output extent for input {}x{} kernel {}x{} pad {}",
                h, w, kh, kw, padding
            )));
        }
        let ho = (hp - kh) / stride + 1;
        let wo = (wp - kw) / stride + 1;
        Ok(Conv2dSpec { batch, cin, cout, h, w, kh, kw, stride, padding, groups, ho, wo })
    }

    /// Valid output range along one axis for kernel offset `k`.
    fn valid_range(&self, k: usize, input_extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let p = self.padding;
        let lo = if p > k { (p - k + s - 1) / s } else { 0 };
        let hi = if input_extent + p > k {
            ((input_extent + p - k - 1) / s + 1).min(out_extent)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn conv2d_forward(spec: &Conv2dSpec, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let Conv2dSpec { batch, cin, cout, h, w: iw, kh, kw, stride: s, padding: p, groups, ho, wo } =
        *spec;
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut out = vec![0.0; batch * cout * ho * wo];
    for b in 0..batch {
        for co in 0..cout {
            let g = co / cout_g;
            let oplane = &mut out[(b * cout + co) * ho * wo..(b * cout + co + 1) * ho * wo];
            if let Some(bias) = bias {
                let bv = bias[co];
                if bv != 0.0 {
                    oplane.iter_mut().for_each(|v| *v += bv);
                }
            }
            for cig in 0..cin_g {
                let ci = g * cin_g + cig;
                let xplane = &x[(b * cin + ci) * h * iw..(b * cin + ci + 1) * h * iw];
                let wbase = ((co * cin_g) + cig) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = spec.valid_range(ky, h, ho);
                    for kx in 0..kw {
                        let wv = w[wbase + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = spec.valid_range(kx, iw, wo);
                        if ox_hi <= ox_lo {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let orow = &mut oplane[oy * wo + ox_lo..oy * wo + ox_hi];
                            if s == 1 {
                                let ix0 = ox_lo + kx - p;
                                let xrow = &xplane[iy * iw + ix0..iy * iw + ix0 + orow.len()];
                                for (ov, &xv) in orow.iter_mut().zip(xrow.iter()) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for (d, ov) in orow.iter_mut().enumerate() {
                                    let ix = (ox_lo + d) * s + kx - p;
                                    *ov += wv * xplane[iy * iw + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_x(spec: &Conv2dSpec, w: &[f64], gout: &[f64]) -> Vec<f64> {
    let Conv2dSpec { batch, cin, cout, h, w: iw, kh, kw, stride: s, padding: p, groups, ho, wo } =
        *spec;
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut dx = vec![0.0; batch * cin * h * iw];
    for b in 0..batch {
        for co in 0..cout {
            let g = co / cout_g;
            let gplane = &gout[(b * cout + co) * ho * wo..(b * cout + co + 1) * ho * wo];
            for cig in 0..cin_g {
                let ci = g * cin_g + cig;
                let dxplane = &mut dx[(b * cin + ci) * h * iw..(b * cin + ci + 1) * h * iw];
                let wbase = ((co * cin_g) + cig) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = spec.valid_range(ky, h, ho);
                    for kx in 0..kw {
                        let wv = w[wbase + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = spec.valid_range(kx, iw, wo);
                        if ox_hi <= ox_lo {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let grow = &gplane[oy * wo + ox_lo..oy * wo + ox_hi];
                            if s == 1 {
                                let ix0 = ox_lo + kx - p;
                                let dxrow = &mut dxplane[iy * iw + ix0..iy * iw + ix0 + grow.len()];
                                for (dv, &gv) in dxrow.iter_mut().zip(grow.iter()) {
                                    *dv += wv * gv;
                                }
                            } else {
                                for (d, &gv) in grow.iter().enumerate() {
                                    let ix = (ox_lo + d) * s + kx - p;
                                    dxplane[iy * iw + ix] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv2d_backward_w(spec: &Conv2dSpec, x: &[f64], gout: &[f64]) -> Vec<f64> {
    let Conv2dSpec { batch, cin, cout, h, w: iw, kh, kw, stride: s, padding: p, groups, ho, wo } =
        *spec;
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut dw = vec![0.0; cout * cin_g * kh * kw];
    for b in 0..batch {
        for co in 0..cout {
            let g = co / cout_g;
            let gplane = &gout[(b * cout + co) * ho * wo..(b * cout + co + 1) * ho * wo];
            for cig in 0..cin_g {
                let ci = g * cin_g + cig;
                let xplane = &x[(b * cin + ci) * h * iw..(b * cin + ci + 1) * h * iw];
                let wbase = ((co * cin_g) + cig) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = spec.valid_range(ky, h, ho);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = spec.valid_range(kx, iw, wo);
                        if ox_hi <= ox_lo {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let grow = &gplane[oy * wo + ox_lo..oy * wo + ox_hi];
                            if s == 1 {
                                let ix0 = ox_lo + kx - p;
                                let xrow = &xplane[iy * iw + ix0..iy * iw + ix0 + grow.len()];
                                for (&gv, &xv) in grow.iter().zip(xrow.iter()) {
                                    acc += gv * xv;
                                }
                            } else {
                                for (d, &gv) in grow.iter().enumerate() {
                                    let ix = (ox_lo + d) * s + kx - p;
                                    acc += gv * xplane[iy * iw + ix];
                                }
                            }
                        }
                        dw[wbase + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
    dw
}

impl Tape {
    pub fn conv2d(
        &self,
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor> {
        let spec = Conv2dSpec::resolve(&x.shape, &w.shape, stride, padding, groups)?;
        if let Some(b) = bias {
            if b.shape != [spec.cout] {
                return Err(Error::ShapeMismatch(format!(
                    "bias shape {:?} != [{}]",
                    b.shape, spec.cout
                )));
            }
        }
        let data = conv2d_forward(&spec, &x.data, &w.data, bias.map(|b| &b.data[..]));
        let out_shape = vec![spec.batch, spec.cout, spec.ho, spec.wo];

        let xd = x.data.clone();
        let wd = w.data.clone();
        let mut deps: Vec<(Option<usize>, super::Vjp)> = vec![
            (x.node, Box::new(move |g: &[f64]| conv2d_backward_x(&spec, &wd, g))),
            (w.node, Box::new(move |g: &[f64]| conv2d_backward_w(&spec, &xd, g))),
        ];
        if let Some(b) = bias {
            let (cout, plane) = (spec.cout, spec.ho * spec.wo);
            let batch = spec.batch;
            deps.push((
                b.node,
                Box::new(move |g: &[f64]| {
                    let mut db = vec![0.0; cout];
                    for bi in 0..batch {
                        for co in 0..cout {
                            let base = (bi * cout + co) * plane;
                            db[co] += g[base..base + plane].iter().sum::<f64>();
                        }
                    }
                    db
                }),
            ));
        }
        Ok(self.make(data, out_shape, deps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn pointwise_identity() {
        let t = Tape::new();
        let x = Tensor::constant((0..9).map(|i| i as f64).collect(), vec![1, 1, 3, 3]).unwrap();
        let w = Tensor::constant(vec![1.0], vec![1, 1, 1, 1]).unwrap();
        let y = t.conv2d(&x, &w, None, 1, 0, 1).unwrap();
        assert_eq!(*y.data, *x.data);
    }

    #[test]
    fn delta_response_equals_kernel_footprint() {
        // 3x3 all-ones kernel, padding 1, one-hot 3x3 input -> all-ones output
        let t = Tape::new();
        let mut xd = vec![0.0; 9];
        xd[4] = 1.0;
        let x = Tensor::constant(xd, vec![1, 1, 3, 3]).unwrap();
        let w = Tensor::constant(vec![1.0; 9], vec![1, 1, 3, 3]).unwrap();
        let y = t.conv2d(&x, &w, None, 1, 1, 1).unwrap();
        assert_eq!(*y.data, vec![1.0; 9]);
    }

    /// Independent naive sliding-dot-product oracle.
    fn naive_conv(
        x: &[f64],
        w: &[f64],
        bias: Option<&[f64]>,
        (b, cin, h, iw): (usize, usize, usize, usize),
        (cout, kh, kw): (usize, usize, usize),
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Vec<f64> {
        let cin_g = cin / groups;
        let cout_g = cout / groups;
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (iw + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; b * cout * ho * wo];
        for bi in 0..b {
            for co in 0..cout {
                let g = co / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.map_or(0.0, |bv| bv[co]);
                        for cig in 0..cin_g {
                            let ci = g * cin_g + cig;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy * stride + ky;
                                    let ix = ox * stride + kx;
                                    if iy < padding || ix < padding {
                                        continue;
                                    }
                                    let (iy, ix) = (iy - padding, ix - padding);
                                    if iy >= h || ix >= iw {
                                        continue;
                                    }
                                    acc += x[((bi * cin + ci) * h + iy) * iw + ix]
                                        * w[((co * cin_g + cig) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let (b, cin, h, iw) = (2, 3, 8, 8);
        let (cout, kh, kw) = (4, 3, 3);
        let stride = 2;
        let padding = 1;
        let x: Vec<f64> = (0..b * cin * h * iw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..cout * cin * kh * kw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tape::new();
        let tx = Tensor::constant(x.clone(), vec![b, cin, h, iw]).unwrap();
        let tw = Tensor::constant(w.clone(), vec![cout, cin, kh, kw]).unwrap();
        let tb = Tensor::constant(bias.clone(), vec![cout]).unwrap();
        let y = t.conv2d(&tx, &tw, Some(&tb), stride, padding, 1).unwrap();
        let oracle =
            naive_conv(&x, &w, Some(&bias), (b, cin, h, iw), (cout, kh, kw), stride, padding, 1);
        assert_eq!(y.data.len(), oracle.len());
        for (a, o) in y.data.iter().zip(oracle.iter()) {
            assert!((a - o).abs() <= 1e-12, "{} vs {}", a, o);
        }
    }

    #[test]
    fn depthwise_matches_naive_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let (b, c, h, iw) = (1, 4, 6, 6);
        let (kh, kw) = (3, 3);
        let x: Vec<f64> = (0..b * c * h * iw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..c * kh * kw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tape::new();
        let tx = Tensor::constant(x.clone(), vec![b, c, h, iw]).unwrap();
        let tw = Tensor::constant(w.clone(), vec![c, 1, kh, kw]).unwrap();
        let y = t.conv2d(&tx, &tw, None, 1, 1, c).unwrap();
        let oracle = naive_conv(&x, &w, None, (b, c, h, iw), (c, kh, kw), 1, 1, c);
        for (a, o) in y.data.iter().zip(oracle.iter()) {
            assert!((a - o).abs() <= 1e-12);
        }
    }

    #[test]
    fn bad_groups_rejected() {
        let t = Tape::new();
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 1, 3, 3]);
        assert!(t.conv2d(&x, &w, None, 1, 1, 2).is_err());
    }

    #[test]
    fn nonpositive_output_rejected() {
        let t = Tape::new();
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(t.conv2d(&x, &w, None, 1, 0, 1).is_err());
    }

    #[test]
    fn even_kernel_rejected() {
        let t = Tape::new();
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let w = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(t.conv2d(&x, &w, None, 1, 0, 1).is_err());
    }
}
