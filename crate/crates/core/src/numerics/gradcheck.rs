use crate::numerics::params::{GradSet, ParamSet};

/// Max relative error between an analytic gradient and central finite
/// differences of `f`, per coordinate: |a−n| / max(1e-5, |a|+|n|). The floor
/// keeps f64 roundoff in the difference quotient (≈ eps/2h) from dominating
/// coordinates whose true gradient is near zero.
pub fn grad_check<F>(f: F, params: &ParamSet, analytic: &GradSet, h: f64) -> f64
where
    F: Fn(&ParamSet) -> f64,
{
    assert!(params.aligned_with(analytic), "grad_check: misaligned sets");
    let flat = params.flatten();
    let grad = analytic.flatten();
    let mut work = params.clone();
    let mut max_err = 0.0f64;
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += h;
        work.unflatten(&plus).unwrap();
        let f_plus = f(&work);
        let mut minus = flat.clone();
        minus[i] -= h;
        work.unflatten(&minus).unwrap();
        let f_minus = f(&work);
        let numeric = (f_plus - f_minus) / (2.0 * h);
        let a = grad[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-5);
        max_err = max_err.max(err);
    }
    max_err
}
