//! Central finite-difference verification of [`backward`](super::backward).

use super::{backward, Scalar, Tensor};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub pass: bool,
}

/// Relative error with a `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare the backward gradient of `f` at `x` with central differences
/// `(f(x+eps·e_i) - f(x-eps·e_i)) / (2·eps)` for every element of `x`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    assert!(eps > 0.0, "eps must be positive");
    let param = x.requiring_grad();
    let root = f(&param)?;
    let grads = backward(&root)?;
    let analytic: Vec<f64> = grads.get_or_zeros(&param).iter().map(|v| v.as_f64()).collect();
    drop(root);

    let base = x.to_vec();
    let mut numeric = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + T::of(eps);
        let plus = f(&Tensor::from_vec(x.shape(), probe.clone())?)?.item().as_f64();
        probe[i] = base[i] - T::of(eps);
        let minus = f(&Tensor::from_vec(x.shape(), probe.clone())?)?.item().as_f64();
        probe[i] = base[i];
        numeric.push((plus - minus) / (2.0 * eps));
    }

    let (worst_index, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0f64), |best, (i, e)| if e > best.1 || e.is_nan() { (i, e) } else { best });
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
        pass: max_rel_err <= tol,
    })
}
