//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Graph, Var};

/// Worst disagreement found by [`finite_diff_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
}

/// Relative error with a unit floor on the denominator, so gradients near
/// zero are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares `backward` against central differences at step `eps` for every
/// scalar of every non-frozen parameter, returning the worst relative error.
pub fn finite_diff_check<F>(f: F, params: &ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    finite_diff_report(f, params, eps).map(|r| r.max_rel_error)
}

pub fn finite_diff_report<F>(f: F, params: &ParamStore, eps: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let grads = g.backward(loss)?;

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let v = f(&mut g, p)?;
        g.value(v).item()
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        probes: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        if params.is_frozen(&name) {
            continue;
        }
        let n = params.get(&name)?.numel();
        for i in 0..n {
            let orig = params.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.get(&name).map_or(0.0, |t| t.data()[i]);
            let err = relative_error(analytic, numeric);
            report.probes += 1;
            if report.worst_param.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = Some(name.clone());
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
