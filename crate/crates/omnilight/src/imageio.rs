//! 8-bit RGB PNG in/out. Internal compute uses [0,1] reals; export rounds
//! half to even.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loads a PNG as a `[3,H,W]` tensor in [0,1].
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::constant(data, vec![3, h, w])
}

/// Writes a `[3,H,W]` tensor in [0,1] as 8-bit RGB PNG.
pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    if image.shape.len() != 3 || image.shape[0] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "save_png expects [3,H,W], got {:?}",
            image.shape
        )));
    }
    let (h, w) = (image.shape[1], image.shape[2]);
    let mut buf = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image.data[c * h * w + y * w + x].clamp(0.0, 1.0) * 255.0;
                buf[(y * w + x) * 3 + c] = v.round_ties_even() as u8;
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn roundtrip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.gen_range(0..=255) as f64 / 255.0).collect();
        let img = Tensor::constant(data.clone(), vec![3, 8, 8]).unwrap();
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        for (a, b) in back.data.iter().zip(data.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn export_rounds_half_to_even() {
        // 0.5/255 quantizes to the even neighbor 0, and 1.5/255 to 2.
        let mut data = vec![0.0; 12];
        data[0] = 0.5 / 255.0;
        data[1] = 1.5 / 255.0;
        data[2] = 2.5 / 255.0;
        data[3] = -1.0;
        data[4] = 2.0; // channel 1 of pixel (0,0)
        let img = Tensor::constant(data, vec![3, 2, 2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.png");
        save_png(&img, &path).unwrap();
        let raw = image::open(&path).unwrap().to_rgb8();
        // Channel-major input maps to pixel 0 channel 0 etc.
        assert_eq!(raw.get_pixel(0, 0).0[0], 0); // 0.5 -> even 0
        assert_eq!(raw.get_pixel(1, 0).0[0], 2); // 1.5 -> even 2
        assert_eq!(raw.get_pixel(0, 1).0[0], 2); // 2.5 -> even 2
        assert_eq!(raw.get_pixel(1, 1).0[0], 0); // clamped below
        assert_eq!(raw.get_pixel(0, 0).0[1], 255); // clamped above
    }
}
