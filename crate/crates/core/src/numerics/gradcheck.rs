use crate::error::{Result, SarmError};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(coordinate, analytic, numeric, relative error)` for every sampled coordinate.
    pub coords: Vec<(usize, f64, f64, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&(usize, f64, f64, f64)> {
        self.coords
            .iter()
            .max_by(|a, b| a.3.partial_cmp(&b.3).unwrap_or(std::cmp::Ordering::Equal))
    }
}

/// Compares `analytic[c]` against `(f(θ+eps·e_c) − f(θ−eps·e_c)) / 2eps` for each
/// sampled coordinate `c`. Relative error is `|a−n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<L>(
    mut loss_fn: L,
    theta: &[f64],
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
) -> Result<GradCheckReport>
where
    L: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(SarmError::Config(format!(
            "grad_check eps must be positive, got {eps}"
        )));
    }
    if theta.len() != analytic.len() {
        return Err(SarmError::Shape(format!(
            "grad_check: {} parameters vs {} gradient entries",
            theta.len(),
            analytic.len()
        )));
    }
    let mut work = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords: Vec::with_capacity(coords.len()),
    };
    for &c in coords {
        if c >= theta.len() {
            return Err(SarmError::Shape(format!("coordinate {c} out of range")));
        }
        work[c] = theta[c] + eps;
        let fp = loss_fn(&work);
        work[c] = theta[c] - eps;
        let fm = loss_fn(&work);
        work[c] = theta[c];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(SarmError::Numeric(format!(
                "non-finite loss at coordinate {c}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[c];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.coords.push((c, a, numeric, rel));
    }
    Ok(report)
}
