//! Small dense symmetric solves for the per-row normal equations.

/// Solves `(a + shift·I) x = rhs` for a symmetric `dim × dim` row-major `a`
/// via an in-place Cholesky factorization of a copy.
///
/// Returns `None` when the shifted matrix is not numerically positive
/// definite. `madds` is incremented by the number of multiply-adds performed.
pub fn cholesky_solve(a: &[f64], rhs: &[f64], shift: f64, madds: &mut u64) -> Option<Vec<f64>> {
    let dim = rhs.len();
    debug_assert_eq!(a.len(), dim * dim);
    if dim == 0 {
        return Some(Vec::new());
    }
    if dim == 1 {
        let d = a[0] + shift;
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        *madds += 1;
        return Some(vec![rhs[0] / d]);
    }
    let mut l = a.to_vec();
    for i in 0..dim {
        l[i * dim + i] += shift;
    }
    let scale = (0..dim).map(|i| l[i * dim + i].abs()).fold(0.0, f64::max);
    // pivots at or below this are treated as a rank deficiency
    let tiny = scale * f64::EPSILON * dim as f64;

    for j in 0..dim {
        let mut d = l[j * dim + j];
        for k in 0..j {
            d -= l[j * dim + k] * l[j * dim + k];
        }
        *madds += j as u64;
        if !(d > tiny) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[j * dim + j] = d;
        for i in j + 1..dim {
            let mut s = l[i * dim + j];
            for k in 0..j {
                s -= l[i * dim + k] * l[j * dim + k];
            }
            l[i * dim + j] = s / d;
        }
        *madds += ((dim - j - 1) * (j + 1)) as u64;
    }

    // forward: L y = rhs
    let mut x = rhs.to_vec();
    for i in 0..dim {
        let mut s = x[i];
        for k in 0..i {
            s -= l[i * dim + k] * x[k];
        }
        x[i] = s / l[i * dim + i];
    }
    // backward: Lᵀ x = y
    for i in (0..dim).rev() {
        let mut s = x[i];
        for k in i + 1..dim {
            s -= l[k * dim + i] * x[k];
        }
        x[i] = s / l[i * dim + i];
    }
    *madds += (dim * (dim + 1)) as u64;
    Some(x)
}
