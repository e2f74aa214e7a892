//! ARMA autocovariances and the partial-autocorrelation parametrization.
//!
//! Convention: `X_t = sum_j ar_j X_{t-j} + e_t + sum_j ma_j e_{t-j}`, `Var(e_t) = sigma2`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Maps partial autocorrelations in (-1, 1) to AR coefficients (Durbin-Levinson).
pub fn pacf_to_coefficients<T: Real>(pacf: &[T]) -> Vec<T> {
    let mut phi: Vec<T> = Vec::with_capacity(pacf.len());
    for (k, &r) in pacf.iter().enumerate() {
        let prev = phi.clone();
        for j in 0..k {
            phi[j] = prev[j] - r * prev[k - 1 - j];
        }
        phi.push(r);
    }
    phi
}

/// Inverse of [`pacf_to_coefficients`]; fails if the AR polynomial has a root on or
/// inside the unit circle.
pub fn coefficients_to_pacf<T: Real>(coeffs: &[T]) -> Result<Vec<T>> {
    let p = coeffs.len();
    let mut phi = coeffs.to_vec();
    let mut pacf = vec![T::zero(); p];
    for k in (0..p).rev() {
        let r = phi[k];
        if !r.is_finite() || r.abs() >= T::one() {
            return Err(Error::NonStationary(format!("partial autocorrelation {} at lag {}", r.as_f64(), k + 1)));
        }
        pacf[k] = r;
        let denom = T::one() - r * r;
        let prev = phi.clone();
        for j in 0..k {
            phi[j] = (prev[j] + r * prev[k - 1 - j]) / denom;
        }
        phi.truncate(k);
    }
    Ok(pacf)
}

pub fn is_stationary<T: Real>(ar: &[T]) -> bool {
    coefficients_to_pacf(ar).is_ok()
}

/// Autocovariances `gamma_0 ..= gamma_max_lag` of a stationary ARMA(p, q) process.
///
/// `gamma_0..gamma_p` come from the linear system linking autocovariances to the
/// MA(infinity) weights; higher lags follow the AR recursion.
pub fn arma_autocovariance<T: Real>(ar: &[T], ma: &[T], sigma2: T, max_lag: usize) -> Result<Vec<T>> {
    if !(sigma2 > T::zero()) {
        return Err(Error::InvalidParams("innovation variance must be positive".into()));
    }
    if ma.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParams("non-finite MA coefficient".into()));
    }
    coefficients_to_pacf(ar)?;
    let p = ar.len();
    let q = ma.len();

    let theta = |j: usize| -> T {
        if j == 0 {
            T::one()
        } else if j <= q {
            ma[j - 1]
        } else {
            T::zero()
        }
    };
    let mut psi = vec![T::zero(); q + 1];
    for j in 0..=q {
        let mut v = theta(j);
        for k in 1..=j.min(p) {
            v += ar[k - 1] * psi[j - k];
        }
        psi[j] = v;
    }
    // sigma2 * sum_{j=k}^{q} theta_j psi_{j-k}
    let rhs = |k: usize| -> T {
        let mut s = T::zero();
        for j in k..=q {
            s += theta(j) * psi[j - k];
        }
        s * sigma2
    };

    let mut a = DMatrix::<T>::zeros(p + 1, p + 1);
    let mut b = DVector::<T>::zeros(p + 1);
    for k in 0..=p {
        a[(k, k)] += T::one();
        for j in 1..=p {
            let lag = k.abs_diff(j);
            a[(k, lag)] -= ar[j - 1];
        }
        b[k] = rhs(k);
    }
    let head = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::NonStationary("autocovariance system is singular".into()))?;

    let len = (max_lag + 1).max(p + 1);
    let mut gamma = vec![T::zero(); len];
    for k in 0..=p {
        gamma[k] = head[k];
    }
    for k in (p + 1)..len {
        let mut v = rhs(k);
        for j in 1..=p {
            v += ar[j - 1] * gamma[k - j];
        }
        gamma[k] = v;
    }
    gamma.truncate(max_lag + 1);
    if !(gamma[0] > T::zero()) {
        return Err(Error::NonStationary("non-positive variance".into()));
    }
    Ok(gamma)
}

/// Autocorrelations `rho_0 ..= rho_max_lag` (unit innovation variance).
pub fn arma_autocorrelation<T: Real>(ar: &[T], ma: &[T], max_lag: usize) -> Result<Vec<T>> {
    let gamma = arma_autocovariance(ar, ma, T::one(), max_lag)?;
    let g0 = gamma[0];
    Ok(gamma.into_iter().map(|g| g / g0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn ar1_closed_form() {
        let g = arma_autocovariance(&[0.5], &[], 1.0, 6).unwrap();
        for (k, gk) in g.iter().enumerate() {
            let exact = 0.5f64.powi(k as i32) / (1.0 - 0.25);
            assert!((gk - exact).abs() <= 1e-10, "lag {k}");
        }
        assert_relative_eq!(g[0], 4.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(g[1], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn ma1_by_convolution() {
        let g = arma_autocovariance(&[], &[0.4], 1.0, 4).unwrap();
        assert_relative_eq!(g[0], 1.16, epsilon = 1e-14);
        assert_relative_eq!(g[1], 0.4, epsilon = 1e-14);
        assert_eq!(g[2], 0.0);
        assert_eq!(g[3], 0.0);
    }

    #[test]
    fn rejects_nonstationary() {
        assert!(matches!(arma_autocovariance(&[1.0], &[], 1.0, 3), Err(Error::NonStationary(_))));
        assert!(matches!(arma_autocovariance(&[0.6, 0.5], &[], 1.0, 3), Err(Error::NonStationary(_))));
    }

    #[test]
    fn arma22_matches_truncated_ma_infinity_sum() {
        // independent route: gamma_k = sigma2 * sum_j psi_j psi_{j+k} with many psi weights
        let ar = [0.4, 0.5];
        let ma = [-0.9, 0.4];
        let n = 4000;
        let mut psi = vec![0.0f64; n];
        for j in 0..n {
            let mut v = match j {
                0 => 1.0,
                1 => ma[0],
                2 => ma[1],
                _ => 0.0,
            };
            if j >= 1 {
                v += ar[0] * psi[j - 1];
            }
            if j >= 2 {
                v += ar[1] * psi[j - 2];
            }
            psi[j] = v;
        }
        let g = arma_autocovariance(&ar, &ma, 1.0, 8).unwrap();
        for k in 0..=8 {
            let oracle: f64 = (0..n - k).map(|j| psi[j] * psi[j + k]).sum();
            assert_relative_eq!(g[k], oracle, max_relative = 1e-9);
        }
    }

    #[test]
    fn yule_walker_recursion_beyond_q() {
        let ar = [0.4, 0.5];
        let ma = [-0.9];
        let g: Vec<f64> = arma_autocovariance(&ar, &ma, 2.0, 12).unwrap();
        for k in 2..=12 {
            let rec = ar[0] * g[k - 1] + ar[1] * g[k - 2];
            assert!((g[k] - rec).abs() <= 1e-10);
        }
    }

    #[test]
    fn pacf_known_ar2() {
        // AR(2) with phi = (0.4, 0.5): r2 = 0.5, r1 = 0.4 / (1 - 0.5)
        let r = coefficients_to_pacf(&[0.4, 0.5]).unwrap();
        assert_relative_eq!(r[1], 0.5, epsilon = 1e-15);
        assert_relative_eq!(r[0], 0.8, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn pacf_round_trip(r in proptest::collection::vec(-0.99f64..0.99, 0..6)) {
            let phi = pacf_to_coefficients(&r);
            prop_assert!(is_stationary(&phi));
            let back = coefficients_to_pacf(&phi).unwrap();
            for (a, b) in r.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
