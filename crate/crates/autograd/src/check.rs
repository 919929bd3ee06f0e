//! Central finite-difference gradient verification.

use crate::{ParamId, ParamStore, Result, Tape, Tensor, Var};

/// Relative error between an analytic and a numeric derivative.
///
/// The denominator is floored at `1e-3` of the largest analytic gradient
/// magnitude so coordinates whose true derivative is zero are judged on the
/// scale of the whole gradient rather than on round-off.
fn rel_err(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3 * scale).max(1e-12);
    (analytic - numeric).abs() / denom
}

fn max_abs(g: &[f64]) -> f64 {
    g.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Compares the autodiff gradient of `f` at `x` against central differences
/// `(f(x + h e_k) − f(x − h e_k)) / 2h` for every coordinate and returns the
/// maximum relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    assert!(h > 0.0 && h <= 1e-2, "step {h} outside (0, 1e-2]");
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv).into_data();
    let scale = max_abs(&analytic);

    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(t.clone(), false);
        Ok(f(&tape, v)?.item())
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for k in 0..x.numel() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[k] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(rel_err(analytic[k], numeric, scale));
    }
    Ok(worst)
}

/// Finite-difference check over selected coordinates of registry
/// parameters. `coords` lists `(parameter, flat index)` pairs; the loss
/// closure rebuilds the graph from the store on every call.
///
/// Every probed parameter has gradient tracking enabled for the analytic
/// pass, frozen or not.
pub fn finite_diff_check_params<F>(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    h: f64,
    f: F,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &'t ParamStore) -> Result<Var<'t>>,
{
    assert!(h > 0.0 && h <= 1e-2, "step {h} outside (0, 1e-2]");
    let saved: Vec<_> = coords
        .iter()
        .map(|&(id, _)| (id, store.get(id).grad_enabled))
        .collect();
    for &(id, _) in coords {
        store.get_mut(id).grad_enabled = true;
    }
    store.zero_grads();
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    tape.backward(loss)?;
    store.accumulate_grads(&tape);
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(id, k)| store.get(id).grad.data()[k])
        .collect();
    let scale = coords
        .iter()
        .map(|&(id, _)| max_abs(store.get(id).grad.data()))
        .fold(0.0, f64::max);
    store.zero_grads();
    for (id, enabled) in saved {
        store.get_mut(id).grad_enabled = enabled;
    }

    let mut worst = 0.0f64;
    for (&(id, k), &a) in coords.iter().zip(&analytic) {
        let orig = store.get(id).value.data()[k];
        store.get_mut(id).value.data_mut()[k] = orig + h;
        let plus = f(&Tape::new(), store)?.item();
        store.get_mut(id).value.data_mut()[k] = orig - h;
        let minus = f(&Tape::new(), store)?.item();
        store.get_mut(id).value.data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(rel_err(a, numeric, scale));
    }
    Ok(worst)
}
