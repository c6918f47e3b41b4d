//! Pointwise ops with trailing-dimension broadcasting.

use super::{broadcast_map, reduce_to_shape, Tape, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    fn binary(
        &self,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        dfa: impl Fn(f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let (data, out_shape) = broadcast_map(a, b, f)?;
        let (ad, bd) = (a.data.clone(), b.data.clone());
        let (ash, bsh) = (a.shape.clone(), b.shape.clone());
        let osh = out_shape.clone();
        let (ad2, bd2, ash2, bsh2, osh2) =
            (ad.clone(), bd.clone(), ash.clone(), bsh.clone(), osh.clone());
        let va = Tensor { shape: ash.clone(), data: ad.clone(), node: None };
        let vb = Tensor { shape: bsh.clone(), data: bd.clone(), node: None };
        let deps: Vec<(Option<usize>, super::Vjp)> = vec![
            (
                a.node,
                Box::new(move |g: &[f64]| {
                    let (full, _) = broadcast_map(&va, &vb, |x, y| dfa(x, y)).unwrap();
                    let scaled: Vec<f64> =
                        full.iter().zip(g.iter()).map(|(d, u)| d * u).collect();
                    reduce_to_shape(&scaled, &osh, &ash)
                }),
            ),
            (
                b.node,
                Box::new(move |g: &[f64]| {
                    let va = Tensor { shape: ash2.clone(), data: ad2.clone(), node: None };
                    let vb = Tensor { shape: bsh2.clone(), data: bd2.clone(), node: None };
                    let (full, _) = broadcast_map(&va, &vb, |x, y| dfb(x, y)).unwrap();
                    let scaled: Vec<f64> =
                        full.iter().zip(g.iter()).map(|(d, u)| d * u).collect();
                    reduce_to_shape(&scaled, &osh2, &bsh2)
                }),
            ),
        ];
        Ok(self.make(data, out_shape, deps))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    /// Division records no special handling for zero denominators; non-finite
    /// values propagate and are caught by [`Tensor::is_finite`] checks.
    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    fn unary(
        &self,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Tensor {
        let data: Vec<f64> = a.data.iter().map(|&x| f(x)).collect();
        let ad = a.data.clone();
        self.make(
            data,
            a.shape.clone(),
            vec![(
                a.node,
                Box::new(move |g: &[f64]| {
                    ad.iter().zip(g.iter()).map(|(&x, &u)| df(x) * u).collect()
                }),
            )],
        )
    }

    pub fn neg(&self, a: &Tensor) -> Tensor {
        self.unary(a, |x| -x, |_| -1.0)
    }

    pub fn relu(&self, a: &Tensor) -> Tensor {
        self.unary(a, |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn gelu(&self, a: &Tensor) -> Tensor {
        self.unary(a, gelu, gelu_grad)
    }

    pub fn sigmoid(&self, a: &Tensor) -> Tensor {
        self.unary(a, sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Tensor {
        self.unary(a, move |x| c * x, move |_| c)
    }

    /// c0 * x + c1 with constant coefficients.
    pub fn affine(&self, a: &Tensor, c0: f64, c1: f64) -> Tensor {
        self.unary(a, move |x| c0 * x + c1, move |_| c0)
    }

    /// Absolute value with subgradient 0 at exact ties.
    pub fn abs(&self, a: &Tensor) -> Tensor {
        self.unary(a, f64::abs, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// x^p for constant p. Caller guarantees x > 0 where p is non-integral.
    pub fn powf_const(&self, a: &Tensor, p: f64) -> Tensor {
        self.unary(a, move |x| x.powf(p), move |x| p * x.powf(p - 1.0))
    }

    /// max(x, c); gradient passes only where x > c.
    pub fn max_const(&self, a: &Tensor, c: f64) -> Tensor {
        self.unary(a, move |x| x.max(c), move |x| if x > c { 1.0 } else { 0.0 })
    }

    pub fn sum_all(&self, a: &Tensor) -> Tensor {
        let s: f64 = a.data.iter().sum();
        let n = a.numel();
        self.make(
            vec![s],
            vec![1],
            vec![(a.node, Box::new(move |g: &[f64]| vec![g[0]; n]))],
        )
    }

    pub fn mean_all(&self, a: &Tensor) -> Tensor {
        let n = a.numel();
        let s: f64 = a.data.iter().sum();
        let inv = 1.0 / n as f64;
        self.make(
            vec![s * inv],
            vec![1],
            vec![(a.node, Box::new(move |g: &[f64]| vec![g[0] * inv; n]))],
        )
    }

    /// Errors if the tensor contains non-finite values.
    pub fn check_finite(&self, a: &Tensor, context: &str) -> Result<()> {
        if a.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }
}
