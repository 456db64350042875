use super::{AutodiffError, ParamStore, Tape, Var};

/// Magnitudes below this are finite-difference roundoff at step 1e-5, so
/// they are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(floor, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares the tape gradient of `f` against central differences for every
/// parameter coordinate and returns the largest relative error. `f` must
/// build a fresh tape from the store and return its scalar output.
pub fn grad_check<F>(f: F, store: &mut ParamStore, eps: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&ParamStore) -> Result<(Tape, Var), AutodiffError>,
{
    store.zero_grads();
    let (tape, out) = f(store)?;
    tape.backward(out, store)?;
    let analytic: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).data.clone()).collect();
    let eval = |s: &ParamStore| -> Result<f64, AutodiffError> {
        let (t, o) = f(s)?;
        Ok(t.value(o).item())
    };
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data[i];
            store.value_mut(id).data[i] = orig + eps;
            let plus = eval(store)?;
            store.value_mut(id).data[i] = orig - eps;
            let minus = eval(store)?;
            store.value_mut(id).data[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[k][i], numeric));
        }
    }
    store.zero_grads();
    Ok(worst)
}
