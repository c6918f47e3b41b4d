//! Minimal dense N-D tensor with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one computation graph. Operations are methods on the
//! tape; tensors without a node id are constants and record nothing. Backward
//! traverses nodes in strict reverse append order and accumulates gradients
//! additively, so using a leaf twice yields the sum of both contributions.
//!
//! Compute type is `f64`. An optional reduced-precision mode rounds every op
//! result to `f32` precision (storage stays `f64`), selectable per tape.

mod conv;
mod elementwise;
pub mod gradcheck;
mod linalg;
mod norm;
mod pool;
mod shape_ops;

use std::cell::RefCell;
use std::rc::Rc;

pub use gradcheck::{grad_check, DEFAULT_H};
pub use pool::PoolMode;

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Vector-Jacobian product: upstream gradient in, gradient w.r.t. one input out.
pub(crate) type Vjp = Box<dyn Fn(&[f64]) -> Vec<f64>>;

struct Node {
    entries: Vec<(NodeId, Vjp)>,
}

/// Dense row-major tensor. Cloning is cheap (data is shared).
#[derive(Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Rc<Vec<f64>>,
    pub node: Option<NodeId>,
}

impl Tensor {
    /// Constant tensor with no tape linkage.
    pub fn constant(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data: Rc::new(data), node: None })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: Rc::new(vec![v]), node: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: Rc::new(vec![0.0; numel(shape)]), node: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(shape={:?}, node={:?}", self.shape, self.node)?;
        if self.numel() <= 8 {
            write!(f, ", data={:?}", self.data)?;
        }
        write!(f, ")")
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Computation tape. One tape per forward/backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    round_f32: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grads: RefCell::new(Vec::new()), round_f32: false }
    }

    /// Tape whose op results are rounded to `f32` precision.
    pub fn new_f32() -> Self {
        Tape { round_f32: true, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf. Gradient is retrievable after `backward`.
    pub fn leaf(&self, data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        let id = self.push_node(Vec::new());
        Ok(Tensor { shape, data: Rc::new(data), node: Some(id) })
    }

    fn push_node(&self, entries: Vec<(NodeId, Vjp)>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { entries });
        nodes.len() - 1
    }

    /// Builds a result tensor, registering VJPs only for node-bearing inputs.
    pub(crate) fn make(
        &self,
        mut data: Vec<f64>,
        shape: Vec<usize>,
        deps: Vec<(Option<NodeId>, Vjp)>,
    ) -> Tensor {
        if self.round_f32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        let entries: Vec<(NodeId, Vjp)> =
            deps.into_iter().filter_map(|(n, v)| n.map(|id| (id, v))).collect();
        let node = if entries.is_empty() { None } else { Some(self.push_node(entries)) };
        Tensor { shape, data: Rc::new(data), node }
    }

    /// Reverse pass from a scalar loss. Populates gradients for every
    /// reachable node; leaves not contributing to the loss get zeros on read.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let root = loss.node.ok_or_else(|| {
            Error::InvalidArgument("loss has no tape linkage (constant)".into())
        })?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            for (src, vjp) in &nodes[i].entries {
                let contrib = vjp(&g);
                match &mut grads[*src] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib.iter()) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
            if !nodes[i].entries.is_empty() {
                continue;
            }
            // Leaf: keep its gradient for retrieval.
            grads[i] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last `backward` w.r.t. a leaf (zeros if unreached).
    pub fn grad(&self, t: &Tensor) -> Option<Vec<f64>> {
        let id = t.node?;
        let grads = self.grads.borrow();
        match grads.get(id) {
            Some(Some(g)) => Some(g.clone()),
            Some(None) => Some(vec![0.0; t.numel()]),
            None => None,
        }
    }
}

// ── Broadcasting helpers (trailing-dimension rules, size-1 expansion) ──

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::NotBroadcastable(a.to_vec(), b.to_vec()));
        };
    }
    Ok(out)
}

/// Row-major strides, with 0 for broadcast (size-1 or missing) dims,
/// right-aligned against `out_shape`.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Sums `grad` (shaped `out_shape`) down to `in_shape` by reducing the
/// broadcast dimensions.
pub(crate) fn reduce_to_shape(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let strides = broadcast_strides(in_shape, out_shape);
    let mut out = vec![0.0; numel(in_shape)];
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src_pos = 0usize;
    for &g in grad {
        out[src_pos] += g;
        // odometer increment
        for d in (0..rank).rev() {
            idx[d] += 1;
            src_pos += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src_pos -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// Evaluates a binary op over the broadcast of two tensors.
pub(crate) fn broadcast_map(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if a.shape == b.shape {
        let data: Vec<f64> =
            a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
        return Ok((data, a.shape.clone()));
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let n = numel(&out_shape);
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let (mut pa, mut pb) = (0usize, 0usize);
    for _ in 0..n {
        out.push(f(a.data[pa], b.data[pb]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            pa += sa[d];
            pb += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            pa -= sa[d] * out_shape[d];
            pb -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Ok((out, out_shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 1]).unwrap(), vec![4, 2, 3]);
        assert_eq!(broadcast_shape(&[1], &[2, 3, 4]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn reduce_to_shape_sums_broadcast_axes() {
        // out [2,3], in [3]: column sums
        let g = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[3]), vec![5.0, 7.0, 9.0]);
        // in [2,1]: row sums
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[2, 1]), vec![6.0, 15.0]);
        // in [1]: total
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[1]), vec![21.0]);
    }

    #[test]
    fn unused_leaf_grad_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![2]).unwrap();
        let y = tape.leaf(vec![3.0], vec![1]).unwrap();
        let loss = tape.sum_all(&x);
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), vec![1.0, 1.0]);
        assert_eq!(tape.grad(&y).unwrap(), vec![0.0]);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let tape = Tape::new();
        let x = tape.leaf(vec![3.0], vec![1]).unwrap();
        let y = tape.mul(&x, &x).unwrap(); // x^2
        let loss = tape.sum_all(&y);
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![2]).unwrap();
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn f32_mode_rounds_results() {
        let tape = Tape::new_f32();
        let x = tape.leaf(vec![0.1], vec![1]).unwrap();
        let y = tape.mul(&x, &x).unwrap();
        assert_eq!(y.data[0], (0.1f64 * 0.1) as f32 as f64);
    }
}
