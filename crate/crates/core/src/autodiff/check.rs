//! Central finite differences, the oracle for every gradient test.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Estimates the gradient of `f` at `point` by central differences,
/// `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)`, one coordinate at a time.
///
/// `point` is a list of parameter arrays; the estimate has the same layout.
pub fn finite_difference<F>(mut f: F, point: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe: Vec<Tensor> = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for p in 0..point.len() {
        let mut g = Tensor::zeros(point[p].shape());
        for i in 0..point[p].len() {
            let orig = point[p].data()[i];
            probe[p].data_mut()[i] = orig + eps;
            let plus = f(&probe)?;
            probe[p].data_mut()[i] = orig - eps;
            let minus = f(&probe)?;
            probe[p].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::FiniteDifference { param: p, index: i });
            }
            g.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// Coordinate-wise relative error `|a - n| / max(|a|, |n|, floor)`,
/// maximised over all coordinates. Returns the error and the
/// `(param, index)` where it occurs.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> (f64, (usize, usize)) {
    let mut worst = (0.0, (0, 0));
    for (p, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (i, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let err = (x - y).abs() / x.abs().max(y.abs()).max(floor);
            if err > worst.0 || err.is_nan() {
                worst = (err, (p, i));
            }
        }
    }
    worst
}
