//! Independent scalar reference for MS-SSIM, written directly against the
//! metric definition (2D Gaussian window, valid convolution, per-scale
//! contrast-structure with luminance at the coarsest scale). Deliberately
//! shares no code with the library implementation.

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const BASE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn window_2d() -> Vec<f64> {
    let c = (WINDOW - 1) as f64 / 2.0;
    let mut w = vec![0.0; WINDOW * WINDOW];
    let mut total = 0.0;
    for i in 0..WINDOW {
        for j in 0..WINDOW {
            let dy = i as f64 - c;
            let dx = j as f64 - c;
            let v = (-(dy * dy + dx * dx) / (2.0 * SIGMA * SIGMA)).exp();
            w[i * WINDOW + j] = v;
            total += v;
        }
    }
    for v in w.iter_mut() {
        *v /= total;
    }
    w
}

/// Mean luminance and contrast-structure terms of one scale, averaged over
/// batch, channels, and all valid window positions.
fn scale_terms(x: &[f64], y: &[f64], b: usize, c: usize, h: usize, w: usize) -> (f64, f64) {
    let win = window_2d();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut lum_sum = 0.0;
    let mut cs_sum = 0.0;
    for img in 0..b * c {
        let xs = &x[img * h * w..(img + 1) * h * w];
        let ys = &y[img * h * w..(img + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..WINDOW {
                    for j in 0..WINDOW {
                        let g = win[i * WINDOW + j];
                        let a = xs[(oy + i) * w + ox + j];
                        let b = ys[(oy + i) * w + ox + j];
                        mx += g * a;
                        my += g * b;
                        mxx += g * a * a;
                        myy += g * b * b;
                        mxy += g * a * b;
                    }
                }
                let var_x = mxx - mx * mx;
                let var_y = myy - my * my;
                let cov = mxy - mx * my;
                lum_sum += (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                cs_sum += (2.0 * cov + c2) / (var_x + var_y + c2);
            }
        }
    }
    let n = (b * c * oh * ow) as f64;
    (lum_sum / n, cs_sum / n)
}

fn downsample2(x: &[f64], maps: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; maps * oh * ow];
    for m in 0..maps {
        for y in 0..oh {
            for xx in 0..ow {
                let base = m * h * w + 2 * y * w + 2 * xx;
                out[m * oh * ow + y * ow + xx] =
                    (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]) / 4.0;
            }
        }
    }
    out
}

/// Reference MS-SSIM of two `[B,C,H,W]` images in [0,1].
pub fn ref_ms_ssim(x: &[f64], y: &[f64], shape: &[usize; 4]) -> f64 {
    let [b, c, mut h, mut w] = *shape;
    let mut scales = 0usize;
    let mut ext = h.min(w);
    while scales < 5 && ext >= WINDOW {
        scales += 1;
        ext /= 2;
    }
    assert!(scales > 0, "image too small for the SSIM window");
    let wsum: f64 = BASE_WEIGHTS[..scales].iter().sum();

    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    let mut product = 1.0;
    for s in 0..scales {
        let (lum, cs) = scale_terms(&xs, &ys, b, c, h, w);
        let weight = BASE_WEIGHTS[s] / wsum;
        let factor = if s + 1 == scales { (lum * cs).max(1e-12) } else { cs.max(1e-12) };
        product *= factor.powf(weight);
        if s + 1 < scales {
            xs = downsample2(&xs, b * c, h, w);
            ys = downsample2(&ys, b * c, h, w);
            h /= 2;
            w /= 2;
        }
    }
    product
}
