use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function, one coordinate at a time:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h`.
pub fn finite_diff_grad<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("finite_diff_grad: step must be > 0, got {h}")));
    }
    let step = T::of(h);
    let mut buf = x.to_vec();
    let mut grad = Vec::with_capacity(buf.len());
    for i in 0..buf.len() {
        let orig = buf[i];
        buf[i] = orig + step;
        let plus = f(&Tensor::from_vec(buf.clone(), x.shape())?)?;
        buf[i] = orig - step;
        let minus = f(&Tensor::from_vec(buf.clone(), x.shape())?)?;
        buf[i] = orig;
        grad.push((plus - minus) / (step + step));
    }
    Tensor::from_vec(grad, x.shape())
}

/// Largest elementwise `|a − b| / max(|a|, |b|, floor)` where the floor keeps
/// near-zero entries from dominating.
pub fn max_rel_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a
        .iter()
        .chain(b)
        .map(|v| v.f64().abs())
        .fold(0.0f64, f64::max)
        .max(1e-3);
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let (x, y) = (x.f64(), y.f64());
            (x - y).abs() / x.abs().max(y.abs()).max(1e-2 * scale)
        })
        .fold(0.0, f64::max)
}
