//! Central finite-difference validation of analytic gradients.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Compares the analytic gradient of a scalar-valued function against central
/// finite differences, coordinate by coordinate. Returns the maximum over
/// coordinates of `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(f: F, x0: &[f64], shape: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let eval = |data: Vec<f64>| -> Result<f64> {
        let tape = Tape::new();
        let x = Tensor::constant(data, shape.to_vec())?;
        let y = f(&tape, &x)?;
        if y.numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "grad_check requires a scalar-valued function, got {:?}",
                y.shape
            )));
        }
        Ok(y.item())
    };

    // Analytic gradient.
    let tape = Tape::new();
    let x = tape.leaf(x0.to_vec(), shape.to_vec())?;
    let y = f(&tape, &x)?;
    if y.numel() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "grad_check requires a scalar-valued function, got {:?}",
            y.shape
        )));
    }
    tape.backward(&y)?;
    let analytic = tape.grad(&x).expect("leaf has a node");

    let mut max_rel = 0.0f64;
    for i in 0..x0.len() {
        let mut plus = x0.to_vec();
        plus[i] += h;
        let mut minus = x0.to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Default step size for 64-bit mode.
pub const DEFAULT_H: f64 = 1e-5;
