//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

/// Smallest eigenvalue of a matrix that is already symmetric.
pub fn min_eigenvalue_symmetric(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    m.symmetric_eigenvalues().min()
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square()
        && (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Solve `m[idx, idx] * z = rhs[idx]` for the principal submatrix selected by `idx`.
/// Returns `None` when the submatrix is numerically singular.
pub fn solve_principal(m: &DMatrix<f64>, rhs: &DVector<f64>, idx: &[usize]) -> Option<DVector<f64>> {
    let k = idx.len();
    if k == 0 {
        return Some(DVector::zeros(0));
    }
    let sub = DMatrix::from_fn(k, k, |i, j| m[(idx[i], idx[j])]);
    let r = DVector::from_fn(k, |i, _| rhs[idx[i]]);
    let lu = sub.full_piv_lu();
    if !lu.is_invertible() {
        return None;
    }
    let z = lu.solve(&r)?;
    z.iter().all(|v| v.is_finite()).then_some(z)
}

/// Stack a slice of vectors into one vector.
pub fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    let len = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(len);
    let mut k = 0;
    for p in parts {
        out.rows_mut(k, p.len()).copy_from(p);
        k += p.len();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn principal_solve_picks_submatrix() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 9.0, 0.0, 9.0, 9.0, 9.0, 0.0, 9.0, 4.0]);
        let rhs = DVector::from_vec(vec![2.0, 100.0, 8.0]);
        let z = solve_principal(&m, &rhs, &[0, 2]).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn spectral_quantities() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!((spectral_radius(&m) - 1.0).abs() < 1e-12);
        assert!((spectral_norm(&m) - 1.0).abs() < 1e-12);
        assert!(min_sym_eigenvalue(&m).abs() < 1e-12);
        assert!(!is_symmetric(&m, 1e-10));
    }
}
