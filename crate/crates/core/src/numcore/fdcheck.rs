use crate::error::{Error, Result};
use crate::numcore::DenseMatrix;

/// Worst elementwise disagreement for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamFdError {
    pub param: usize,
    pub max_rel_error: f64,
    pub at: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub per_param: Vec<ParamFdError>,
}

impl FdReport {
    pub fn worst(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Compares `analytic` gradients against central differences
/// `(f(p+h) − f(p−h)) / 2h`, one entry at a time.
///
/// The relative error of an entry is `|a − n| / max(|a|, |n|, τ)` where
/// `τ = 1e-6 · max(1, max_i |a_i|)` over that parameter, so entries that are
/// zero in both gradients score 0 and entries far below the parameter's
/// gradient scale are not judged against floating-point noise alone.
pub fn finite_difference_check<F>(
    mut loss_fn: F,
    params: &[DenseMatrix],
    analytic: &[DenseMatrix],
    step: f64,
) -> Result<FdReport>
where
    F: FnMut(&[DenseMatrix]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::input("one analytic gradient per parameter is required"));
    }
    if !(step > 0.0) {
        return Err(Error::input("finite-difference step must be positive"));
    }
    let base_a = loss_fn(params)?;
    let base_b = loss_fn(params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::Protocol(format!(
            "loss is not deterministic: {base_a} vs {base_b}"
        )));
    }

    let mut work: Vec<DenseMatrix> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(Error::input(format!("gradient {pi} has the wrong shape")));
        }
        let scale = grad.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = 1e-6 * scale.max(1.0);
        let mut worst = ParamFdError {
            param: pi,
            max_rel_error: 0.0,
            at: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
        };
        let (rows, cols) = params[pi].shape();
        for r in 0..rows {
            for c in 0..cols {
                let orig = params[pi][(r, c)];
                work[pi][(r, c)] = orig + step;
                let plus = loss_fn(&work)?;
                work[pi][(r, c)] = orig - step;
                let minus = loss_fn(&work)?;
                work[pi][(r, c)] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                let a = grad[(r, c)];
                let denom = a.abs().max(numeric.abs()).max(floor);
                let err = (a - numeric).abs() / denom;
                if err > worst.max_rel_error || !err.is_finite() {
                    worst = ParamFdError {
                        param: pi,
                        max_rel_error: err,
                        at: (r, c),
                        analytic: a,
                        numeric,
                    };
                }
            }
        }
        per_param.push(worst);
    }
    Ok(FdReport { per_param })
}
