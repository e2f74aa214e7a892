//! Paired Monte Carlo comparison of dispersion estimators.

use std::fmt::Write as _;

use rayon::prelude::*;

use super::dgp::DgpSpec;
use super::rng::replication_rng;
use crate::dispersion::{minimize_dispersion, DispersionObjective, ObjectiveKind, OptimizerSettings};
use crate::error::{Error, Result};
use crate::glm::{ClusterDataset, TargetContrast};
use crate::inference::jackknife_variance;
use crate::working_cov::CovarianceStructure;

/// Largest tolerated share of failed method fits per design.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// Label of the reference method that every report contains.
pub const UNWEIGHTED: &str = "unweighted";

/// One estimator: objective kind plus working structure.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSpec {
    pub label: String,
    pub kind: ObjectiveKind,
    pub structure: CovarianceStructure,
}

impl MethodSpec {
    pub fn new(label: impl Into<String>, kind: ObjectiveKind, structure: CovarianceStructure) -> Self {
        Self { label: label.into(), kind, structure }
    }

    pub fn unweighted() -> Self {
        Self::new(UNWEIGHTED, ObjectiveKind::Unweighted, CovarianceStructure::independence())
    }

    fn objective(&self, p: usize) -> Result<DispersionObjective<f64>> {
        let target = if self.kind.is_sandwich() { Some(TargetContrast::coordinate(p, 0)?) } else { None };
        DispersionObjective::new(self.kind, target)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentSettings {
    pub replications: usize,
    pub root_seed: u64,
    pub optimizer: OptimizerSettings,
}

impl ExperimentSettings {
    pub fn new(replications: usize, root_seed: u64) -> Self {
        Self { replications, root_seed, optimizer: OptimizerSettings::default() }
    }
}

/// FNV-1a digest of a dataset's bytes.
pub fn dataset_digest(dataset: &ClusterDataset<f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |v: f64| {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for c in dataset.clusters() {
        feed(c.len() as f64);
        c.y().iter().for_each(|v| feed(*v));
        c.x().iter().for_each(|v| feed(*v));
    }
    h
}

/// Squared error of `beta_hat[0]` for each method, `None` on failure.
#[derive(Clone, Debug, PartialEq)]
pub struct Replication {
    pub index: usize,
    pub digest: u64,
    pub squared_errors: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MseRow {
    pub dgp: String,
    pub method: String,
    pub clusters: usize,
    /// Replications where both this method and the unweighted fit succeeded.
    pub reps: usize,
    pub mse: f64,
    /// `mse / mse(unweighted)` over the same replications.
    pub mse_ratio: f64,
    /// Delta-method Monte Carlo standard error of the ratio.
    pub mc_se: f64,
    pub failures: usize,
}

/// Paired comparison `a - b` of squared errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedDifference {
    pub reps: usize,
    pub mean: f64,
    pub se: f64,
}

impl PairedDifference {
    /// Mean difference in units of its standard error.
    pub fn z(&self) -> f64 {
        self.mean / self.se
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DesignResult {
    pub dgp: DgpSpec,
    pub label: String,
    pub methods: Vec<String>,
    pub replications: Vec<Replication>,
    pub failure_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MseReport {
    pub designs: Vec<DesignResult>,
    pub rows: Vec<MseRow>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ratio_with_se(a: &[f64], b: &[f64]) -> (f64, f64) {
    let n = a.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let r = ma / mb;
    if a.len() < 2 {
        return (r, f64::NAN);
    }
    // residuals of the linearized ratio a - r b
    let z: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - r * y).collect();
    let mz = mean(&z);
    let var = z.iter().map(|v| (v - mz).powi(2)).sum::<f64>() / (n - 1.0);
    (r, (var / n).sqrt() / mb)
}

impl DesignResult {
    fn method_index(&self, label: &str) -> Result<usize> {
        self.methods
            .iter()
            .position(|m| m == label)
            .ok_or_else(|| Error::InvalidArgument(format!("no method labelled {label}")))
    }

    fn paired(&self, a: usize, b: usize) -> (Vec<f64>, Vec<f64>) {
        self.replications
            .iter()
            .filter_map(|r| Some((r.squared_errors[a]?, r.squared_errors[b]?)))
            .unzip()
    }

    fn rows(&self) -> Vec<MseRow> {
        let base = 0;
        (0..self.methods.len())
            .map(|m| {
                let (a, b) = self.paired(m, base);
                let (ratio, se) = if m == base { (1.0, 0.0) } else { ratio_with_se(&a, &b) };
                MseRow {
                    dgp: self.label.clone(),
                    method: self.methods[m].clone(),
                    clusters: self.dgp.clusters,
                    reps: a.len(),
                    mse: mean(&a),
                    mse_ratio: ratio,
                    mc_se: se,
                    failures: self.replications.iter().filter(|r| r.squared_errors[m].is_none()).count(),
                }
            })
            .collect()
    }
}

impl MseReport {
    pub fn row(&self, dgp: &str, method: &str) -> Option<&MseRow> {
        self.rows.iter().find(|r| r.dgp == dgp && r.method == method)
    }

    /// Paired difference of squared errors between methods `a` and `b`.
    pub fn paired_difference(&self, dgp: &str, a: &str, b: &str) -> Result<PairedDifference> {
        let design = self
            .designs
            .iter()
            .find(|d| d.label == dgp)
            .ok_or_else(|| Error::InvalidArgument(format!("no design labelled {dgp}")))?;
        let (ia, ib) = (design.method_index(a)?, design.method_index(b)?);
        let (x, y) = design.paired(ia, ib);
        let d: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u - v).collect();
        if d.len() < 2 {
            return Err(Error::InvalidArgument("need two paired replications".into()));
        }
        let m = mean(&d);
        let var = d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        Ok(PairedDifference { reps: d.len(), mean: m, se: (var / d.len() as f64).sqrt() })
    }

    /// Delimiter-separated table with header `dgp,method,I,reps,mse_ratio,mc_se`.
    pub fn to_table(&self, delimiter: char) -> String {
        let d = delimiter;
        let mut s = format!("dgp{d}method{d}I{d}reps{d}mse_ratio{d}mc_se\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}{d}{}{d}{}{d}{}{d}{:.16e}{d}{:.16e}", r.dgp, r.method, r.clusters, r.reps, r.mse_ratio, r.mc_se);
        }
        s
    }
}

fn run_design(index: usize, dgp: &DgpSpec, methods: &[MethodSpec], settings: &ExperimentSettings) -> Result<DesignResult> {
    let family = dgp.family();
    let reps: Vec<Result<Replication>> = (0..settings.replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = replication_rng(settings.root_seed, index as u64, r as u64);
            let data = dgp.generate(&mut rng)?;
            let digest = dataset_digest(&data);
            let squared_errors = methods
                .iter()
                .map(|m| {
                    let out = m.objective(data.p()).and_then(|obj| {
                        minimize_dispersion(&data, &family, &m.structure, &obj, &settings.optimizer)
                            .map(|fit| (fit.beta[0] - dgp.beta_true).powi(2))
                    });
                    match out {
                        Ok(v) if v.is_finite() => Some(v),
                        Ok(_) => None,
                        Err(e) => {
                            log::debug!("replication {r}, method {}: {e}", m.label);
                            None
                        }
                    }
                })
                .collect();
            assert_eq!(digest, dataset_digest(&data), "dataset changed during fitting");
            Ok(Replication { index: r, digest, squared_errors })
        })
        .collect();
    let replications = reps.into_iter().collect::<Result<Vec<_>>>()?;
    let failed: usize = replications.iter().map(|r| r.squared_errors.iter().filter(|v| v.is_none()).count()).sum();
    let failure_rate = failed as f64 / (replications.len() * methods.len()) as f64;
    if failed > 0 {
        log::warn!("{dgp:?}: {failed} failed fits ({:.2}%)", 100.0 * failure_rate);
    }
    if failure_rate > MAX_FAILURE_RATE {
        return Err(Error::FailureRate { rate: failure_rate });
    }
    Ok(DesignResult {
        dgp: *dgp,
        label: format!("{}:I={}", dgp.kind, dgp.clusters),
        methods: methods.iter().map(|m| m.label.clone()).collect(),
        replications,
        failure_rate,
    })
}

/// Fits every method on the same simulated datasets and reports the mean squared
/// error of `beta_hat[0]` relative to the unweighted estimator.
///
/// The unweighted method is prepended when absent. Replication `r` of design `d`
/// draws from `replication_rng(root_seed, d, r)`, so the report does not depend
/// on the number of worker threads.
pub fn run_mse_experiment(dgps: &[DgpSpec], methods: &[MethodSpec], settings: &ExperimentSettings) -> Result<MseReport> {
    if settings.replications < 2 {
        return Err(Error::InvalidArgument("need at least two replications".into()));
    }
    let mut labels = std::collections::HashSet::new();
    if !methods.iter().all(|m| labels.insert(m.label.as_str())) {
        return Err(Error::InvalidArgument("method labels must be unique".into()));
    }
    let mut all: Vec<MethodSpec> = methods.to_vec();
    match all.iter().position(|m| m.kind == ObjectiveKind::Unweighted) {
        Some(k) => {
            let m = all.remove(k);
            all.insert(0, m);
        }
        None => {
            if labels.contains(UNWEIGHTED) {
                return Err(Error::InvalidArgument(format!("label {UNWEIGHTED} is reserved")));
            }
            all.insert(0, MethodSpec::unweighted());
        }
    }
    let mut designs = Vec::with_capacity(dgps.len());
    for (d, dgp) in dgps.iter().enumerate() {
        dgp.validate()?;
        designs.push(run_design(d, dgp, &all, settings)?);
    }
    let rows = designs.iter().flat_map(DesignResult::rows).collect();
    Ok(MseReport { designs, rows })
}

/// Mean jackknife variance against the Monte Carlo variance of `beta_hat[0]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationReport {
    pub reps: usize,
    pub failures: usize,
    pub mean_estimated_variance: f64,
    pub empirical_variance: f64,
}

impl CalibrationReport {
    pub fn ratio(&self) -> f64 {
        self.mean_estimated_variance / self.empirical_variance
    }
}

/// Repeats fit plus jackknife with `steps` dispersion Newton steps.
pub fn jackknife_calibration(dgp: &DgpSpec, method: &MethodSpec, steps: usize, settings: &ExperimentSettings) -> Result<CalibrationReport> {
    dgp.validate()?;
    if settings.replications < 2 {
        return Err(Error::InvalidArgument("need at least two replications".into()));
    }
    let family = dgp.family();
    let out: Vec<Option<(f64, f64)>> = (0..settings.replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = replication_rng(settings.root_seed, 0, r as u64);
            let mut run = || -> Result<(f64, f64)> {
                let data = dgp.generate(&mut rng)?;
                let obj = method.objective(data.p())?;
                let fit = minimize_dispersion(&data, &family, &method.structure, &obj, &settings.optimizer)?;
                let c = TargetContrast::coordinate(data.p(), 0)?;
                let v = jackknife_variance(&fit, &data, &family, &obj, steps)?;
                Ok((fit.beta[0], v.variance(&c)))
            };
            run().map_err(|e| log::debug!("replication {r}: {e}")).ok()
        })
        .collect();
    let ok: Vec<(f64, f64)> = out.iter().flatten().copied().collect();
    let failures = out.len() - ok.len();
    if failures as f64 > MAX_FAILURE_RATE * out.len() as f64 {
        return Err(Error::FailureRate { rate: failures as f64 / out.len() as f64 });
    }
    let betas: Vec<f64> = ok.iter().map(|v| v.0).collect();
    let mb = mean(&betas);
    let empirical = betas.iter().map(|b| (b - mb).powi(2)).sum::<f64>() / (betas.len() - 1) as f64;
    Ok(CalibrationReport {
        reps: ok.len(),
        failures,
        mean_estimated_variance: mean(&ok.iter().map(|v| v.1).collect::<Vec<_>>()),
        empirical_variance: empirical,
    })
}
