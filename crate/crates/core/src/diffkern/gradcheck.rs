//! Central finite-difference gradient verification.

use super::store::ParameterStore;
use super::tape::GradMap;

/// Compare analytic gradients against central finite differences of a
/// scalar loss, component by component, and return the worst relative
/// error `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn finite_diff_max_rel_err(
    store: &ParameterStore,
    analytic: &GradMap,
    eps: f64,
    loss: impl Fn(&ParameterStore) -> f64,
) -> f64 {
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for (path, grad) in analytic {
        for i in 0..grad.len() {
            let orig = probe.get(path).unwrap().data()[i];
            probe.get_mut(path).unwrap().data_mut()[i] = orig + eps;
            let lp = loss(&probe);
            probe.get_mut(path).unwrap().data_mut()[i] = orig - eps;
            let lm = loss(&probe);
            probe.get_mut(path).unwrap().data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
