//! Standard normal CDF and multivariate normal sampling.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// `Phi(x) = erfc(-x / sqrt 2) / 2`.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// `N(mean, cov)` sampler holding a square-root factor of `cov`.
#[derive(Clone, Debug)]
pub struct MvnSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl MvnSampler {
    /// Cholesky factor, or a symmetric square root when `cov` is only semidefinite.
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n || cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("covariance must be a finite n x n matrix".into()));
        }
        if (cov - cov.transpose()).amax() > 1e-12 * cov.amax().max(1.0) {
            return Err(Error::NotPsd);
        }
        if let Some(ch) = cov.clone().cholesky() {
            return Ok(Self { mean, factor: ch.l() });
        }
        let eig = SymmetricEigen::new(cov.clone());
        let top = eig.eigenvalues.amax();
        if eig.eigenvalues.iter().any(|e| *e < -1e-10 * top) {
            return Err(Error::NotPsd);
        }
        let root = eig.eigenvalues.map(|e| e.max(0.0).sqrt());
        let factor = &eig.eigenvectors * DMatrix::from_diagonal(&root);
        Ok(Self { mean, factor })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.factor * z
    }
}

/// One draw from `N(mean, cov)`.
pub fn sample_mvn<R: Rng + ?Sized>(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    Ok(MvnSampler::new(mean.clone(), cov)?.sample(rng))
}
