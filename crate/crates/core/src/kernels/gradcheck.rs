//! Central finite differences.

use super::KernelError;

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub passed: bool,
}

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(f: F, point: &[f64], step: f64) -> Result<Vec<f64>, KernelError>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(KernelError::NonFiniteEvaluation(i));
        }
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Compares the analytic gradient returned by `f` with central differences.
/// Relative error per coordinate is `|a − n| / max(1e-8, |a| + |n|)`.
pub fn fd_check_gradient<F>(
    f: F,
    point: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<FdReport, KernelError>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (value, analytic) = f(point);
    if !value.is_finite() {
        return Err(KernelError::NonFiniteEvaluation(point.len()));
    }
    if analytic.len() != point.len() {
        return Err(KernelError::Shape(format!(
            "gradient has {} entries for {} coordinates",
            analytic.len(),
            point.len()
        )));
    }
    let numeric = central_difference(|x| f(x).0, point, step)?;
    let (mut worst_index, mut max_rel_error) = (0, 0.0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
        if rel > max_rel_error || !rel.is_finite() {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(FdReport {
        passed: max_rel_error < tolerance,
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
