//! Central-difference gradient checking. Used by the fitting pipeline's
//! post-fit verification and throughout the test suites as the independent
//! oracle for every hand-written backward pass.

/// Central finite-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(mut f: F, point: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + eps;
        let hi = f(&probe);
        probe[i] = point[i] - eps;
        let lo = f(&probe);
        probe[i] = point[i];
        grads.push((hi - lo) / (2.0 * eps));
    }
    grads
}

/// Largest relative disagreement between two gradient vectors, with an
/// absolute floor so near-zero entries do not explode the ratio.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs()).max(1e-6);
            (a - n).abs() / scale
        })
        .fold(0.0, f64::max)
}

/// Cosine similarity between two flat vectors; 0 when either is all-zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_recovered() {
        let f = |v: &[f64]| v[0] * v[0] + 2.0 * v[0] * v[1] + v[1] * v[1];
        let g = finite_diff_grad(f, &[1.0, 2.0], 1e-6);
        assert!((g[0] - 6.0).abs() < 1e-6);
        assert!((g[1] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn rel_error_uses_absolute_floor() {
        let err = max_rel_error(&[0.0, 1.0], &[1e-9, 1.0]);
        assert!(err < 1e-2);
    }

    #[test]
    fn cosine_handles_zero_vectors() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert!((cosine_similarity(&[1.0, 0.0], &[2.0, 0.0]) - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&[1.0, 0.0], &[-3.0, 0.0]) + 1.0).abs() < 1e-12);
    }
}
