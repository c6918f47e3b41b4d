//! Batched matrix multiplication with batch-dimension broadcasting.

use super::{broadcast_shape, broadcast_strides, numel, Tape, Tensor};
use crate::error::{Error, Result};

/// c[m,n] += a[m,k] * b[k,n], with `b` iterated contiguously in the inner loop.
fn matmul_block(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T (dot products of rows).
fn matmul_nt_block(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow.iter()) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n].
fn matmul_tn_block(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

struct BatchPlan {
    batch_shape: Vec<usize>,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

fn batch_plan(a_shape: &[usize], b_shape: &[usize]) -> Result<BatchPlan> {
    let ab = &a_shape[..a_shape.len() - 2];
    let bb = &b_shape[..b_shape.len() - 2];
    let batch_shape = broadcast_shape(ab, bb)?;
    let nb = numel(&batch_shape).max(1);
    let sa = broadcast_strides(ab, &batch_shape);
    let sb = broadcast_strides(bb, &batch_shape);
    let rank = batch_shape.len();
    let mut a_offsets = Vec::with_capacity(nb);
    let mut b_offsets = Vec::with_capacity(nb);
    let mut idx = vec![0usize; rank];
    let (mut pa, mut pb) = (0usize, 0usize);
    for _ in 0..nb {
        a_offsets.push(pa);
        b_offsets.push(pb);
        for d in (0..rank).rev() {
            idx[d] += 1;
            pa += sa[d];
            pb += sb[d];
            if idx[d] < batch_shape[d] {
                break;
            }
            pa -= sa[d] * batch_shape[d];
            pb -= sb[d] * batch_shape[d];
            idx[d] = 0;
        }
    }
    Ok(BatchPlan { batch_shape, a_offsets, b_offsets })
}

impl Tape {
    /// `a [.., m, k] @ b [.., k, n] -> [.., m, n]`, batch dims broadcast.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape.len() < 2 || b.shape.len() < 2 {
            return Err(Error::ShapeMismatch("matmul requires rank >= 2".into()));
        }
        let (m, ka) = (a.shape[a.shape.len() - 2], a.shape[a.shape.len() - 1]);
        let (kb, n) = (b.shape[b.shape.len() - 2], b.shape[b.shape.len() - 1]);
        if ka != kb {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims {} vs {}",
                ka, kb
            )));
        }
        let k = ka;
        let plan = batch_plan(&a.shape, &b.shape)?;
        let nb = plan.a_offsets.len();
        let mut out_shape = plan.batch_shape.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![0.0; nb * m * n];
        for (bi, chunk) in data.chunks_mut(m * n).enumerate() {
            let ao = plan.a_offsets[bi] * m * k;
            let bo = plan.b_offsets[bi] * k * n;
            matmul_block(&a.data[ao..ao + m * k], &b.data[bo..bo + k * n], chunk, m, k, n);
        }

        let (ad, bd) = (a.data.clone(), b.data.clone());
        let (ash, bsh) = (a.shape.clone(), b.shape.clone());
        let (ash2, bsh2) = (ash.clone(), bsh.clone());
        let bd_for_a = bd.clone();
        let ad_for_b = ad;
        let deps: Vec<(Option<usize>, super::Vjp)> = vec![
            (
                a.node,
                Box::new(move |g: &[f64]| {
                    // dA = dC @ B^T, reduced over broadcast batches
                    let plan = batch_plan(&ash, &bsh).unwrap();
                    let mut da = vec![0.0; numel(&ash)];
                    for bi in 0..plan.a_offsets.len() {
                        let go = bi * m * n;
                        let ao = plan.a_offsets[bi] * m * k;
                        let bo = plan.b_offsets[bi] * k * n;
                        matmul_nt_block(
                            &g[go..go + m * n],
                            &bd_for_a[bo..bo + k * n],
                            &mut da[ao..ao + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    da
                }),
            ),
            (
                b.node,
                Box::new(move |g: &[f64]| {
                    // dB = A^T @ dC, reduced over broadcast batches
                    let plan = batch_plan(&ash2, &bsh2).unwrap();
                    let mut db = vec![0.0; numel(&bsh2)];
                    for bi in 0..plan.a_offsets.len() {
                        let go = bi * m * n;
                        let ao = plan.a_offsets[bi] * m * k;
                        let bo = plan.b_offsets[bi] * k * n;
                        matmul_tn_block(
                            &ad_for_b[ao..ao + m * k],
                            &g[go..go + m * n],
                            &mut db[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    db
                }),
            ),
        ];
        Ok(self.make(data, out_shape, deps))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self, a: &Tensor) -> Result<Tensor> {
        if a.shape.len() < 2 {
            return Err(Error::ShapeMismatch("transpose requires rank >= 2".into()));
        }
        let rank = a.shape.len();
        let (m, n) = (a.shape[rank - 2], a.shape[rank - 1]);
        let nb = a.numel() / (m * n);
        let mut out_shape = a.shape.clone();
        out_shape[rank - 2] = n;
        out_shape[rank - 1] = m;
        let transpose = move |src: &[f64]| -> Vec<f64> {
            let mut dst = vec![0.0; src.len()];
            for b in 0..nb {
                let o = b * m * n;
                for i in 0..m {
                    for j in 0..n {
                        dst[o + j * m + i] = src[o + i * n + j];
                    }
                }
            }
            dst
        };
        let data = transpose(&a.data);
        let back = move |g: &[f64]| -> Vec<f64> {
            let mut dst = vec![0.0; g.len()];
            for b in 0..nb {
                let o = b * m * n;
                for j in 0..n {
                    for i in 0..m {
                        dst[o + i * n + j] = g[o + j * m + i];
                    }
                }
            }
            dst
        };
        Ok(self.make(data, out_shape, vec![(a.node, Box::new(back))]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn matmul_identity() {
        let t = Tape::new();
        let a = Tensor::constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let i = Tensor::constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        assert_eq!(*t.matmul(&a, &i).unwrap().data, *a.data);
    }

    #[test]
    fn matmul_direct() {
        let t = Tape::new();
        let a = Tensor::constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let b = Tensor::constant(vec![3.0, 4.0], vec![2, 1]).unwrap();
        assert_eq!(*t.matmul(&a, &b).unwrap().data, vec![11.0]);
    }

    /// Independent naive triple-loop oracle.
    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tape::new();
        let ta = Tensor::constant(a.clone(), vec![m, k]).unwrap();
        let tb = Tensor::constant(b.clone(), vec![k, n]).unwrap();
        let c = t.matmul(&ta, &tb).unwrap();
        let oracle = naive_matmul(&a, &b, m, k, n);
        for (x, y) in c.data.iter().zip(oracle.iter()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_inner_mismatch() {
        let t = Tape::new();
        let a = Tensor::constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = Tensor::constant(vec![0.0; 8], vec![4, 2]).unwrap();
        assert!(t.matmul(&a, &b).is_err());
    }

    #[test]
    fn batched_matmul_with_broadcast() {
        // [2,2,3] @ [3,1] -> [2,2,1]
        let t = Tape::new();
        let a = t.leaf((0..12).map(|i| i as f64).collect(), vec![2, 2, 3]).unwrap();
        let b = t.leaf(vec![1.0, 1.0, 1.0], vec![3, 1]).unwrap();
        let c = t.matmul(&a, &b).unwrap();
        assert_eq!(c.shape, vec![2, 2, 1]);
        assert_eq!(*c.data, vec![3.0, 12.0, 21.0, 30.0]);
        let loss = t.sum_all(&c);
        t.backward(&loss).unwrap();
        // dB sums over both batches: column sums of A
        let gb = t.grad(&b).unwrap();
        assert_eq!(gb, vec![0.0 + 3.0 + 6.0 + 9.0, 1.0 + 4.0 + 7.0 + 10.0, 2.0 + 5.0 + 8.0 + 11.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let t = Tape::new();
        let a = Tensor::constant((0..6).map(|i| i as f64).collect(), vec![2, 3]).unwrap();
        let tt = t.transpose_last2(&t.transpose_last2(&a).unwrap()).unwrap();
        assert_eq!(*tt.data, *a.data);
    }
}
