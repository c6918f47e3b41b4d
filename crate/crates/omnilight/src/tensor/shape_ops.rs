//! Concatenation, splitting, and reshape.

use super::{numel, Tape, Tensor};
use crate::error::{Error, Result};

fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, inner)
}

impl Tape {
    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero parts".into()));
        }
        let rank = parts[0].shape.len();
        if axis >= rank {
            return Err(Error::InvalidArgument(format!("concat axis {} out of rank {}", axis, rank)));
        }
        for p in parts {
            if p.shape.len() != rank {
                return Err(Error::ShapeMismatch("concat rank mismatch".into()));
            }
            for d in 0..rank {
                if d != axis && p.shape[d] != parts[0].shape[d] {
                    return Err(Error::ShapeMismatch(format!(
                        "concat extent mismatch on dim {}: {:?} vs {:?}",
                        d, p.shape, parts[0].shape
                    )));
                }
            }
        }
        let mut out_shape = parts[0].shape.clone();
        out_shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let (outer, inner) = axis_blocks(&out_shape, axis);
        let total_axis = out_shape[axis];
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape[axis]).collect();
        let mut data = vec![0.0; numel(&out_shape)];
        let mut offset = 0usize;
        for (p, &sz) in parts.iter().zip(sizes.iter()) {
            for o in 0..outer {
                let src = &p.data[o * sz * inner..(o + 1) * sz * inner];
                let dst_base = (o * total_axis + offset) * inner;
                data[dst_base..dst_base + sz * inner].copy_from_slice(src);
            }
            offset += sz;
        }
        let mut deps: Vec<(Option<usize>, super::Vjp)> = Vec::with_capacity(parts.len());
        let mut offset = 0usize;
        for (p, &sz) in parts.iter().zip(sizes.iter()) {
            let off = offset;
            deps.push((
                p.node,
                Box::new(move |g: &[f64]| {
                    let mut dp = vec![0.0; outer * sz * inner];
                    for o in 0..outer {
                        let src_base = (o * total_axis + off) * inner;
                        dp[o * sz * inner..(o + 1) * sz * inner]
                            .copy_from_slice(&g[src_base..src_base + sz * inner]);
                    }
                    dp
                }),
            ));
            offset += sz;
        }
        Ok(self.make(data, out_shape, deps))
    }

    pub fn split(&self, x: &Tensor, sizes: &[usize], axis: usize) -> Result<Vec<Tensor>> {
        let rank = x.shape.len();
        if axis >= rank {
            return Err(Error::InvalidArgument(format!("split axis {} out of rank {}", axis, rank)));
        }
        if sizes.iter().sum::<usize>() != x.shape[axis] {
            return Err(Error::ShapeMismatch(format!(
                "split sizes {:?} do not sum to extent {}",
                sizes, x.shape[axis]
            )));
        }
        let (outer, inner) = axis_blocks(&x.shape, axis);
        let total_axis = x.shape[axis];
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0usize;
        for &sz in sizes {
            let mut shape = x.shape.clone();
            shape[axis] = sz;
            let mut data = vec![0.0; outer * sz * inner];
            for o in 0..outer {
                let src_base = (o * total_axis + offset) * inner;
                data[o * sz * inner..(o + 1) * sz * inner]
                    .copy_from_slice(&x.data[src_base..src_base + sz * inner]);
            }
            let off = offset;
            let back = move |g: &[f64]| -> Vec<f64> {
                let mut dx = vec![0.0; outer * total_axis * inner];
                for o in 0..outer {
                    let dst_base = (o * total_axis + off) * inner;
                    dx[dst_base..dst_base + sz * inner]
                        .copy_from_slice(&g[o * sz * inner..(o + 1) * sz * inner]);
                }
                dx
            };
            out.push(self.make(data, shape, vec![(x.node, Box::new(back))]));
            offset += sz;
        }
        Ok(out)
    }

    /// Shape change with identical element count and order.
    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != x.numel() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {:?} changes element count",
                x.shape, shape
            )));
        }
        let data = x.data.as_ref().clone();
        Ok(self.make(
            data,
            shape.to_vec(),
            vec![(x.node, Box::new(move |g: &[f64]| g.to_vec()))],
        ))
    }
}
