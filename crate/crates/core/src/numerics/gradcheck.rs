use super::params::ParamSet;
use crate::error::{Error, Result};

/// Outcome of a finite-difference sweep over all trainable scalars.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<GradCheckPoint>,
    pub checked: usize,
    /// Frozen entries are listed here and never perturbed.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct GradCheckPoint {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Denominator floor for the relative error at flat points.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients against central differences.
///
/// `objective(params, with_grad)` must return the scalar loss and, when
/// `with_grad` is set, accumulate its gradient into `params`. It has to be
/// deterministic; two identical evaluations that disagree abort the check.
pub fn grad_check<F>(params: &mut ParamSet, h: f64, mut objective: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamSet, bool) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    params.clear_grads();
    let base = objective(params, true)?;
    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, p)| {
            let g = p
                .tensor
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.tensor.len()]);
            (n.to_string(), g)
        })
        .collect();
    let skipped = params
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    params.clear_grads();

    let replay = objective(params, false)?;
    if replay.to_bits() != base.to_bits() {
        return Err(Error::Harness(format!(
            "objective is not deterministic: {base} then {replay}"
        )));
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped,
    };
    for (name, grads) in analytic {
        for (i, &a) in grads.iter().enumerate() {
            let orig = params.get(&name)?.data()[i];
            params.get_mut(&name)?.data_mut()[i] = orig + h;
            let plus = objective(params, false)?;
            params.get_mut(&name)?.data_mut()[i] = orig - h;
            let minus = objective(params, false)?;
            params.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(GradCheckPoint {
                    name: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    params.clear_grads();
    Ok(report)
}
