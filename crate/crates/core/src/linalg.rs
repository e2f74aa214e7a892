//! Small dense helpers shared by the fitting code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::scalar::Real;

pub(crate) fn symmetrize<T: Real>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    for j in 0..n {
        for k in (j + 1)..n {
            let avg = (m[(j, k)] + m[(k, j)]) * T::half();
            m[(j, k)] = avg;
            m[(k, j)] = avg;
        }
    }
}

pub(crate) fn cholesky<T: Real>(m: &DMatrix<T>) -> Option<Cholesky<T, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Cholesky::new(m.clone())
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub(crate) fn spd_inverse<T: Real>(m: &DMatrix<T>) -> Option<DMatrix<T>> {
    let mut inv = cholesky(m)?.inverse();
    symmetrize(&mut inv);
    Some(inv)
}

/// Cholesky inverse with diagonal jitter escalation: `1e-12 * trace / n`, then x10, up to
/// three retries.
pub(crate) fn spd_inverse_jittered<T: Real>(m: &DMatrix<T>) -> Option<DMatrix<T>> {
    if let Some(inv) = spd_inverse(m) {
        return Some(inv);
    }
    let n = m.nrows().max(1);
    let mut jitter = T::of(1e-12) * m.trace().abs() / T::of(n as f64);
    if jitter <= T::zero() {
        jitter = T::of(1e-12);
    }
    for _ in 0..3 {
        let mut shifted = m.clone();
        for j in 0..m.nrows() {
            shifted[(j, j)] += jitter;
        }
        if let Some(inv) = spd_inverse(&shifted) {
            return Some(inv);
        }
        jitter *= T::of(10.0);
    }
    None
}

/// Ratio of extreme eigenvalues of a symmetric matrix (infinite when not PD).
pub(crate) fn condition_number<T: Real>(m: &DMatrix<T>) -> f64 {
    if m.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(v.as_f64()));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of a symmetric matrix with eigenvalues replaced by `max(|eig|, rel * max|eig|)`.
///
/// Returns `None` when the matrix is zero or non-finite.
pub(crate) fn floored_inverse<T: Real>(h: &DMatrix<T>, rel: T) -> Option<(DMatrix<T>, bool)> {
    if h.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut sym = h.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let norm = eig.eigenvalues.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    if norm <= T::zero() || !norm.is_finite() {
        return None;
    }
    let floor = rel * norm;
    let mut floored = false;
    let inv_vals: DVector<T> = eig.eigenvalues.map(|v| {
        if v < floor {
            floored = true;
        }
        T::one() / v.abs().max(floor)
    });
    let q = &eig.eigenvectors;
    let inv = q * DMatrix::from_diagonal(&inv_vals) * q.transpose();
    Some((inv, floored))
}

pub(crate) fn inf_norm<T: Real>(v: &DVector<T>) -> T {
    v.iter().fold(T::zero(), |a, x| a.max(x.abs()))
}

/// Quadratic form `c' M c`.
pub(crate) fn quad_form<T: Real>(m: &DMatrix<T>, c: &DVector<T>) -> T {
    (c.transpose() * m * c)[(0, 0)]
}
