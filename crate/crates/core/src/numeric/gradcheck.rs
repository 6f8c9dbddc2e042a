use std::collections::BTreeMap;

use super::params::ParameterSet;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients to central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per parameter: maximum relative error over its coordinates.
    pub per_param: BTreeMap<String, f64>,
    pub eps: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.values().copied().fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

/// Smallest denominator of [`relative_error`]. Central differences of an
/// `O(1)` loss resolve derivatives to roughly `1e-11` at `eps = 1e-5`, so
/// gradients below this floor are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Relative error with denominator `max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Check `d loss / d param` for every parameter of `params`.
///
/// `f` records a computation on a fresh tape and returns its scalar output.
/// Every coordinate is perturbed by `±eps` and the central difference
/// compared with the tape gradient.
pub fn check_gradients<F>(params: &ParameterSet, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Usage(format!("eps must lie in [1e-7, 1e-4], got {eps}")));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    if tape.shape(out) != (1, 1) {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar output, got {:?}",
            tape.shape(out)
        )));
    }
    let analytic = tape.backward(out)?.for_params(params);

    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut t = Tape::new();
        let o = f(&mut t, p)?;
        Ok(t.value(o).item())
    };

    let mut per_param = BTreeMap::new();
    let mut work = params.clone();
    for (name, grad) in &analytic {
        let mut worst: f64 = 0.0;
        for i in 0..grad.len() {
            let orig = work.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
        per_param.insert(name.clone(), worst);
    }
    Ok(GradCheckReport { per_param, eps })
}
