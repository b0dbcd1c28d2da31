use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Floor on the denominator of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against central differences of `loss` at every
/// parameter entry. The loss must be a deterministic function of the
/// store; this is verified before any perturbation.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    analytic: &Gradients,
    eps: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let first = loss(store)?;
    let second = loss(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NondeterministicLoss { first, second });
    }

    let mut params = Vec::with_capacity(store.len());
    for p in 0..store.len() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..store.values()[p].len() {
            let orig = store.values()[p].data()[k];
            store.values_mut()[p].data_mut()[k] = orig + eps;
            let plus = loss(store);
            store.values_mut()[p].data_mut()[k] = orig - eps;
            let minus = loss(store);
            store.values_mut()[p].data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic.0[p].data()[k];
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        params.push(ParamCheck {
            name: store.names()[p].clone(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport { params })
}
