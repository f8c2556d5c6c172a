use crate::{GradStore, ParamStore};

/// Denominator floor for [`relative_error`] in [`finite_diff_check`].
///
/// Central differences in `f64` carry roughly `1e-11` of absolute noise at the
/// default step, so components smaller than this are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(floor)
}

/// Compares analytic gradients against central differences
/// `(f(θ + h·e) - f(θ - h·e)) / 2h`, element by element, and returns the
/// largest relative error.
pub fn finite_diff_check<F>(mut f: F, params: &ParamStore<f64>, analytic: &GradStore<f64>, step: f64) -> f64
where
    F: FnMut(&ParamStore<f64>) -> f64,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for id in params.ids() {
        let n = params.get(id).data().len();
        for i in 0..n {
            let original = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = original + step;
            let up = f(&probe);
            probe.get_mut(id).data_mut()[i] = original - step;
            let down = f(&probe);
            probe.get_mut(id).data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * step);
            let exact = analytic.get(id).data()[i];
            worst = worst.max(relative_error(exact, numeric, REL_ERROR_FLOOR));
        }
    }
    worst
}
