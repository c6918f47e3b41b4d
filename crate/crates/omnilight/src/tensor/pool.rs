//! Global pooling, 2x2 mean pooling, and nearest-neighbor resizing.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

impl Tape {
    /// `[B,C,H,W] -> [B,C]`. Avg spreads the gradient uniformly; max routes
    /// the subgradient to the first maximizer in row-major order.
    pub fn pool_global(&self, x: &Tensor, mode: PoolMode) -> Result<Tensor> {
        if x.shape.len() != 4 {
            return Err(Error::ShapeMismatch("pool_global expects [B,C,H,W]".into()));
        }
        let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let plane = h * w;
        if plane == 0 {
            return Err(Error::InvalidArgument("empty spatial extent".into()));
        }
        let mut data = vec![0.0; b * c];
        let mut argmax = vec![0usize; b * c];
        for i in 0..b * c {
            let src = &x.data[i * plane..(i + 1) * plane];
            match mode {
                PoolMode::Avg => data[i] = src.iter().sum::<f64>() / plane as f64,
                PoolMode::Max => {
                    let mut best = src[0];
                    let mut bj = 0;
                    for (j, &v) in src.iter().enumerate().skip(1) {
                        if v > best {
                            best = v;
                            bj = j;
                        }
                    }
                    data[i] = best;
                    argmax[i] = bj;
                }
            }
        }
        let back = move |g: &[f64]| -> Vec<f64> {
            let mut dx = vec![0.0; b * c * plane];
            match mode {
                PoolMode::Avg => {
                    let inv = 1.0 / plane as f64;
                    for i in 0..b * c {
                        let gv = g[i] * inv;
                        dx[i * plane..(i + 1) * plane].iter_mut().for_each(|d| *d = gv);
                    }
                }
                PoolMode::Max => {
                    for i in 0..b * c {
                        dx[i * plane + argmax[i]] = g[i];
                    }
                }
            }
            dx
        };
        Ok(self.make(data, vec![b, c], vec![(x.node, Box::new(back))]))
    }

    /// Non-overlapping 2x2 mean pooling; odd trailing rows/cols are dropped.
    pub fn avgpool2x2(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 4 {
            return Err(Error::ShapeMismatch("avgpool2x2 expects [B,C,H,W]".into()));
        }
        let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::InvalidArgument("input too small for 2x2 pooling".into()));
        }
        let mut data = vec![0.0; b * c * ho * wo];
        for i in 0..b * c {
            let src = &x.data[i * h * w..(i + 1) * h * w];
            let dst = &mut data[i * ho * wo..(i + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let p = 2 * oy * w + 2 * ox;
                    dst[oy * wo + ox] = 0.25 * (src[p] + src[p + 1] + src[p + w] + src[p + w + 1]);
                }
            }
        }
        let back = move |g: &[f64]| -> Vec<f64> {
            let mut dx = vec![0.0; b * c * h * w];
            for i in 0..b * c {
                let gs = &g[i * ho * wo..(i + 1) * ho * wo];
                let dst = &mut dx[i * h * w..(i + 1) * h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = gs[oy * wo + ox] * 0.25;
                        let p = 2 * oy * w + 2 * ox;
                        dst[p] += gv;
                        dst[p + 1] += gv;
                        dst[p + w] += gv;
                        dst[p + w + 1] += gv;
                    }
                }
            }
            dx
        };
        Ok(self.make(data, vec![b, c, ho, wo], vec![(x.node, Box::new(back))]))
    }

    /// Nearest-neighbor resize of `[B,C,H,W]` to `(th, tw)`.
    pub fn resize_nearest(&self, x: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
        if x.shape.len() != 4 {
            return Err(Error::ShapeMismatch("resize_nearest expects [B,C,H,W]".into()));
        }
        let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        if th == 0 || tw == 0 {
            return Err(Error::InvalidArgument("zero target extent".into()));
        }
        let ys: Vec<usize> = (0..th).map(|y| y * h / th).collect();
        let xs: Vec<usize> = (0..tw).map(|xx| xx * w / tw).collect();
        let mut data = vec![0.0; b * c * th * tw];
        for i in 0..b * c {
            let src = &x.data[i * h * w..(i + 1) * h * w];
            let dst = &mut data[i * th * tw..(i + 1) * th * tw];
            for (oy, &iy) in ys.iter().enumerate() {
                for (ox, &ix) in xs.iter().enumerate() {
                    dst[oy * tw + ox] = src[iy * w + ix];
                }
            }
        }
        let (ys2, xs2) = (ys, xs);
        let back = move |g: &[f64]| -> Vec<f64> {
            let mut dx = vec![0.0; b * c * h * w];
            for i in 0..b * c {
                let gs = &g[i * th * tw..(i + 1) * th * tw];
                let dst = &mut dx[i * h * w..(i + 1) * h * w];
                for (oy, &iy) in ys2.iter().enumerate() {
                    for (ox, &ix) in xs2.iter().enumerate() {
                        dst[iy * w + ix] += gs[oy * tw + ox];
                    }
                }
            }
            dx
        };
        Ok(self.make(data, vec![b, c, th, tw], vec![(x.node, Box::new(back))]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_pools_to_constant() {
        let t = Tape::new();
        let x = Tensor::constant(vec![2.5; 8], vec![1, 2, 2, 2]).unwrap();
        let avg = t.pool_global(&x, PoolMode::Avg).unwrap();
        let max = t.pool_global(&x, PoolMode::Max).unwrap();
        assert_eq!(*avg.data, vec![2.5, 2.5]);
        assert_eq!(*max.data, vec![2.5, 2.5]);
    }

    #[test]
    fn avg_and_max_direct() {
        let t = Tape::new();
        let x = Tensor::constant(vec![1.0, 2.0, 3.0, 4.0], vec![1, 1, 2, 2]).unwrap();
        assert_eq!(t.pool_global(&x, PoolMode::Avg).unwrap().data[0], 2.5);
        assert_eq!(t.pool_global(&x, PoolMode::Max).unwrap().data[0], 4.0);
    }

    #[test]
    fn max_tie_break_routes_to_first_maximizer() {
        let t = Tape::new();
        let x = t.leaf(vec![4.0, 1.0, 4.0, 0.0], vec![1, 1, 2, 2]).unwrap();
        let m = t.pool_global(&x, PoolMode::Max).unwrap();
        let loss = t.sum_all(&m);
        t.backward(&loss).unwrap();
        assert_eq!(t.grad(&x).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_spatial_extent_rejected() {
        let t = Tape::new();
        let x = Tensor::constant(vec![], vec![1, 2, 0, 3]).unwrap();
        assert!(t.pool_global(&x, PoolMode::Avg).is_err());
    }

    #[test]
    fn resize_nearest_upscale_then_grad() {
        let t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![1, 1, 2, 2]).unwrap();
        let y = t.resize_nearest(&x, 4, 4).unwrap();
        assert_eq!(y.data[0], 1.0);
        assert_eq!(y.data[3], 2.0);
        assert_eq!(y.data[15], 4.0);
        let loss = t.sum_all(&y);
        t.backward(&loss).unwrap();
        assert_eq!(t.grad(&x).unwrap(), vec![4.0; 4]);
    }

    #[test]
    fn avgpool_halves_and_averages() {
        let t = Tape::new();
        let x = Tensor::constant((0..16).map(|i| i as f64).collect(), vec![1, 1, 4, 4]).unwrap();
        let y = t.avgpool2x2(&x).unwrap();
        assert_eq!(y.shape, vec![1, 1, 2, 2]);
        assert_eq!(y.data[0], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
    }
}
