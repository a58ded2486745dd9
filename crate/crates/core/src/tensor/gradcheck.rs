use super::graph::{Graph, NodeId, ParamStore};
use crate::error::Result;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Relative error with a small floor on the denominator so that entries whose
/// true gradient is zero are judged on absolute error instead.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Compares `backward` against central finite differences for every entry of every parameter.
///
/// `build` must construct the same scalar loss deterministically on each call.
pub fn grad_check<F>(params: &ParamStore, eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(p);
        let l = build(&mut g)?;
        Ok(g.value(l).item())
    };
    let analytic = {
        let mut g = Graph::new(params);
        let l = build(&mut g)?;
        g.backward(l)?
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    for p in 0..params.len() {
        for j in 0..params.by_index(p).len() {
            let orig = params.by_index(p).values()[j];
            work.by_index_mut(p).values_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work.by_index_mut(p).values_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work.by_index_mut(p).values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(p).map_or(0.0, |g| g.values()[j]);
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}
