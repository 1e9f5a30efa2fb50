//! Central finite-difference gradient checking.
//!
//! The checker only ever runs the forward pass; it never consults the
//! backward implementation it is validating.

use super::{Array, AutodiffError, Graph, ParamStore, Var};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Denominator floor for the relative error so that near-zero gradients are
/// judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-2;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients of `f` with central differences of step `h`
/// for every element of every input.
///
/// `f` builds a scalar loss from the given input vars on a fresh graph.
pub fn check<F, E>(inputs: &[Array<f64>], h: f64, f: F) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let eval = |arrays: &[Array<f64>]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = arrays.iter().map(|a| g.constant(a.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.input(a.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.max_rel_error = report.max_rel_error.max(rel_error(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Like [`check`], but perturbs every element of every parameter in `params`.
/// `f` binds whatever parameters it needs from the graph's store.
pub fn check_params<F, E>(params: &ParamStore<f64>, h: f64, f: F) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    check_params_strided(params, h, 1, f)
}

/// [`check_params`] on every `stride`-th element of each parameter, for
/// models too large to probe exhaustively.
pub fn check_params_strided<F, E>(
    params: &ParamStore<f64>,
    h: f64,
    stride: usize,
    f: F,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64, E> {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::with_params(params);
    let loss = f(&mut g)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut probe = params.clone();
    for id in params.ids() {
        let n = params.get(id).len();
        let analytic = grads
            .param(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        for i in (0..n).step_by(stride.max(1)) {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.max_rel_error = report.max_rel_error.max(rel_error(analytic[i], numeric));
            report.max_abs_error = report.max_abs_error.max((analytic[i] - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}
