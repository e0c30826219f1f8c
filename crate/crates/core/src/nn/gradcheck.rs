//! Central finite-difference gradient checking.

use super::{ParamId, ParamStore};

/// Denominator floor for the relative error, so that components whose true
/// gradient is essentially zero are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_path: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the gradients accumulated in `analytic` against central differences of `loss`.
///
/// `store` is perturbed in place and restored bit-exactly after each probe.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    analytic: &ParamStore,
    params: &[ParamId],
    h: f64,
    mut loss: F,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_path: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &id in params {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).as_slice()[k];
            store.value_mut(id).as_mut_slice()[k] = orig + h;
            let plus = loss(store);
            store.value_mut(id).as_mut_slice()[k] = orig - h;
            let minus = loss(store);
            store.value_mut(id).as_mut_slice()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.grad(id).as_slice()[k];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst_path.is_empty() {
                report.max_rel_err = err;
                report.worst_path = store.path(id).to_owned();
                report.worst_index = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}
