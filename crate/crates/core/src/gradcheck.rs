use crate::error::{Error, Result};

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_partial(f, x, &coords, eps)
}

/// Central differences over the listed coordinates only; the returned vector
/// has one entry per listed coordinate.
pub fn finite_diff_partial<F>(f: F, x: &[f64], coords: &[usize], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid(format!("finite-difference eps must be positive, got {eps}")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= x.len() {
            return Err(Error::Index(format!("coordinate {i} of {}", x.len())));
        }
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe);
        probe[i] = orig - eps;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("non-finite function value near coordinate {i}")));
        }
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}
