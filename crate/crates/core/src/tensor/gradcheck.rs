use crate::error::{Error, Result};

/// Compares an analytic gradient against central finite differences over
/// every coordinate. See [`finite_diff_check_coords`].
pub fn finite_diff_check<F>(f: F, params: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..params.len()).collect();
    finite_diff_check_coords(f, params, analytic, h, &coords)
}

/// Central differences `(f(θ + s e_i) - f(θ - s e_i)) / 2s` with step
/// `s = h · max(1, |θ_i|)` on the listed coordinates. Returns the largest
/// `|analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn finite_diff_check_coords<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    coords: &[usize],
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Usage(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    if analytic.len() != params.len() {
        return Err(Error::shape(format!(
            "{} parameters but {} analytic gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let mut theta = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        if i >= theta.len() {
            return Err(Error::shape(format!(
                "coordinate {i} out of {}",
                theta.len()
            )));
        }
        let step = h * theta[i].abs().max(1.0);
        let original = theta[i];
        theta[i] = original + step;
        let plus = f(&theta);
        theta[i] = original - step;
        let minus = f(&theta);
        theta[i] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "function is not finite around coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}
