//! Central-difference gradient oracle.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Relative errors are taken against `max(|analytic|, |numeric|, REL_FLOOR)`, so
/// coordinates whose true gradient is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares `backward` against `(f(p+ε) − f(p−ε)) / 2ε` for every scalar of every
/// parameter and reports the worst discrepancy.
pub fn grad_check<F>(params: &ParamStore<f64>, epsilon: f64, f: F) -> Result<GradCheck>
where
    F: for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::contract(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("objective is not finite ({v})")));
        }
        Ok(v)
    };

    let analytic = {
        let mut g = Graph::with_params(params);
        let loss = f(&mut g)?;
        if !g.value(loss).item().is_finite() {
            return Err(Error::Numeric("objective is not finite".into()));
        }
        g.backward(loss)?
    };

    let mut probe = params.clone();
    let mut report = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, worst: None, coordinates: 0 };
    for id in 0..params.len() {
        for k in 0..params.by_id(id).len() {
            let orig = params.by_id(id).data()[k];
            probe.by_id_mut(id).data_mut()[k] = orig + epsilon;
            let up = eval(&probe)?;
            probe.by_id_mut(id).data_mut()[k] = orig - epsilon;
            let down = eval(&probe)?;
            probe.by_id_mut(id).data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * epsilon);
            let exact = analytic.by_id(id).data()[k];
            let abs = (numeric - exact).abs();
            let rel = abs / exact.abs().max(numeric.abs()).max(REL_FLOOR);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((params.name(id).to_string(), k));
            }
        }
    }
    Ok(report)
}
