//! Sampling from the counterexample law and a Monte Carlo check against the
//! estimation stack.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::law::{CounterexampleSpec, Law};
use crate::dispersion::{minimize_dispersion, DispersionObjective, OptimizerSettings};
use crate::error::{Error, Result};
use crate::glm::{ClusterData, ClusterDataset, GlmFamily, TargetContrast};
use crate::sim::replication_rng;
use crate::working_cov::CovarianceStructure;

/// Points in the inverse-CDF table of the truncated quartic component.
pub const TABLE_SIZE: usize = 100_000;

/// Draws from `p_delta`: with probability `1 - lambda2` the truncated `1/(1+x^4)`
/// component (inverse CDF by table interpolation), otherwise `N(0, nu^2)`.
#[derive(Clone, Debug)]
pub struct PdeltaSampler {
    lambda2: f64,
    nu: f64,
    xs: Vec<f64>,
    cdf: Vec<f64>,
}

// antiderivative of 1/(1+x^4) with value 0 at x = 0
fn quartic_cdf(x: f64) -> f64 {
    let r2 = std::f64::consts::SQRT_2;
    let l = ((x * x + r2 * x + 1.0) / (x * x - r2 * x + 1.0)).ln();
    (0.5 * l + (r2 * x + 1.0).atan() + (r2 * x - 1.0).atan()) / (2.0 * r2)
}

impl PdeltaSampler {
    /// Table nodes are uniform in `log(1 + x)` on `[0, delta]`.
    pub fn new(law: &Law) -> Result<Self> {
        let top = law.spec.delta.ln_1p();
        let xs: Vec<f64> = (0..TABLE_SIZE).map(|k| (top * k as f64 / (TABLE_SIZE - 1) as f64).exp_m1()).collect();
        let base = quartic_cdf(0.0);
        let mut cdf: Vec<f64> = xs.iter().map(|&x| quartic_cdf(x) - base).collect();
        let total = *cdf.last().expect("table is non-empty");
        if !(total > 0.0) || (total - law.q0).abs() > 1e-6 * law.q0 {
            return Err(Error::InvalidArgument(format!("sampler table mass {total} disagrees with {}", law.q0)));
        }
        cdf.iter_mut().for_each(|c| *c /= total);
        if cdf.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("sampler table is not monotone".into()));
        }
        Ok(Self { lambda2: law.lambda2, nu: law.nu2.sqrt(), xs, cdf })
    }

    fn quartic_abs(&self, u: f64) -> f64 {
        let k = self.cdf.partition_point(|c| *c < u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        self.xs[k - 1] + t * (self.xs[k] - self.xs[k - 1])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if rng.random::<f64>() < self.lambda2 {
            self.nu * rng.sample::<f64, _>(StandardNormal)
        } else {
            let x = self.quartic_abs(rng.random::<f64>());
            if rng.random::<bool>() { x } else { -x }
        }
    }
}

/// `clusters` ungrouped draws `(X, Y)` with `Y = X + sigma(X) eps`.
pub fn sample_dataset<R: Rng + ?Sized>(
    spec: &CounterexampleSpec,
    sampler: &PdeltaSampler,
    clusters: usize,
    rng: &mut R,
) -> Result<ClusterDataset<f64>> {
    let data = (0..clusters)
        .map(|_| {
            let x = sampler.sample(rng);
            let e: f64 = rng.sample(StandardNormal);
            let y = x + spec.conditional_variance(x).sqrt() * e;
            ClusterData::new(DVector::from_element(1, y), DMatrix::from_element(1, 1, x))
        })
        .collect::<Result<Vec<_>>>()?;
    ClusterDataset::new(data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossCheckReport {
    pub reps: usize,
    pub failures: usize,
    /// Mean squared error of the slope around its true value 1.
    pub mse_eqml: f64,
    pub mse_gee: f64,
    pub mse_sandwich: f64,
    /// Paired `sandwich - eqml` squared-error difference: mean and standard error.
    pub diff_mean: f64,
    pub diff_se: f64,
    pub mean_gamma_eqml: (f64, f64),
}

/// Fits the two-piece working model under EQML, GEE and sandwich objectives on
/// `reps` simulated samples of size `clusters`.
pub fn empirical_cross_check(
    spec: &CounterexampleSpec,
    law: &Law,
    clusters: usize,
    reps: usize,
    root_seed: u64,
    settings: &OptimizerSettings,
) -> Result<CrossCheckReport> {
    if reps < 2 {
        return Err(Error::InvalidArgument("need at least two replications".into()));
    }
    let sampler = PdeltaSampler::new(law)?;
    let structure = CovarianceStructure::two_piece(0);
    let family = GlmFamily::gaussian();
    let objectives = [
        DispersionObjective::eqml(),
        DispersionObjective::gee(),
        DispersionObjective::sandwich(TargetContrast::coordinate(1, 0)?),
    ];
    let runs: Vec<Option<([f64; 3], (f64, f64))>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = replication_rng(root_seed, 0, r as u64);
            let mut run = || -> Result<([f64; 3], (f64, f64))> {
                let data = sample_dataset(spec, &sampler, clusters, &mut rng)?;
                let mut se = [0.0; 3];
                let mut gamma = (0.0, 0.0);
                for (k, obj) in objectives.iter().enumerate() {
                    let fit = minimize_dispersion(&data, &family, &structure, obj, settings)?;
                    se[k] = (fit.beta[0] - 1.0).powi(2);
                    if k == 0 {
                        gamma = (fit.gamma.0[0], fit.gamma.0[1]);
                    }
                }
                Ok((se, gamma))
            };
            run().map_err(|e| log::debug!("replication {r}: {e}")).ok()
        })
        .collect();
    let ok: Vec<_> = runs.iter().flatten().copied().collect();
    let failures = reps - ok.len();
    if ok.len() < 2 || failures as f64 > 0.05 * reps as f64 {
        return Err(Error::FailureRate { rate: failures as f64 / reps as f64 });
    }
    let n = ok.len() as f64;
    let mean = |k: usize| ok.iter().map(|v| v.0[k]).sum::<f64>() / n;
    let diffs: Vec<f64> = ok.iter().map(|v| v.0[2] - v.0[0]).collect();
    let dm = diffs.iter().sum::<f64>() / n;
    let dv = diffs.iter().map(|d| (d - dm).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(CrossCheckReport {
        reps: ok.len(),
        failures,
        mse_eqml: mean(0),
        mse_gee: mean(1),
        mse_sandwich: mean(2),
        diff_mean: dm,
        diff_se: (dv / n).sqrt(),
        mean_gamma_eqml: (ok.iter().map(|v| v.1 .0).sum::<f64>() / n, ok.iter().map(|v| v.1 .1).sum::<f64>() / n),
    })
}
