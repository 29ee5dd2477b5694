use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Below this magnitude the comparison switches from relative to absolute
/// error, since central differences cannot resolve gradients near zero.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval_loss<F>(f: &F, params: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::with_params(params);
    let loss = f(&mut g)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::invalid("gradient_check", "function must return a scalar"));
    }
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "gradient_check" });
    }
    Ok(v)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences for every element of every parameter in `params`.
///
/// The store is restored to its original values before returning.
pub fn gradient_check<F>(f: F, params: &mut ParamStore<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let ids: Vec<ParamId> = params.ids().collect();
    gradient_check_subset(f, params, eps, &ids)
}

/// [`gradient_check`] restricted to the listed parameters.
pub fn gradient_check_subset<F>(f: F, params: &mut ParamStore<f64>, eps: f64, ids: &[ParamId]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let elements: Vec<(ParamId, usize)> =
        ids.iter().flat_map(|&id| (0..params.get(id).numel()).map(move |k| (id, k))).collect();
    gradient_check_elements(f, params, eps, &elements)
}

/// [`gradient_check`] on individual `(parameter, flat index)` elements.
pub fn gradient_check_elements<F>(
    f: F,
    params: &mut ParamStore<f64>,
    eps: f64,
    elements: &[(ParamId, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("gradient_check", "eps must be positive"));
    }
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::with_params(params);
        let loss = f(&mut g)?;
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFinite { op: "gradient_check" });
        }
        let grads = g.backward(loss)?;
        let mut out: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        for (id, gr) in grads.params() {
            out[id.index()].copy_from_slice(gr);
        }
        out
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: None,
    };
    for &(id, k) in elements {
        if k >= params.get(id).numel() {
            return Err(Error::invalid("gradient_check", format!("element {k} outside `{}`", params.name(id))));
        }
        let orig = params.get(id).data()[k];
        params.get_mut(id).data_mut()[k] = orig + eps;
        let plus = eval_loss(&f, params);
        params.get_mut(id).data_mut()[k] = orig - eps;
        let minus = eval_loss(&f, params);
        params.get_mut(id).data_mut()[k] = orig;
        let numeric = (plus? - minus?) / (2.0 * eps);
        let a = analytic[id.index()][k];
        let rel = relative_error(a, numeric);
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst = Some((params.name(id).to_string(), k));
        }
        report.checked += 1;
    }
    Ok(report)
}
