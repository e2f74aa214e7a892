//! Run configuration (TOML). Every table rejects unknown keys; see the README for
//! the full key list.

use std::path::Path;

use nalgebra::DVector;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use sandreg::counterexample::CounterexampleSpec;
use sandreg::sim::{DgpKind, DgpSpec, Latent, MethodSpec};
use sandreg::{
    CorrelationKind, CovarianceStructure, GlmFamily, Link, ObjectiveKind, OptimizerSettings, RandomEffectsDesign, ScaleMode,
    TargetContrast, VarianceFn,
};

use crate::data::DataColumns;
use crate::error::{CliError, Result};

fn cfg<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    Gaussian,
    Binomial,
    Poisson,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum LinkName {
    Identity,
    Logit,
    Log,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    Independence,
    Exchangeable,
    Ar1,
    Arma,
    RandomEffects,
    TwoPiece,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ScaleName {
    Unit,
    Free,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum DgpName {
    LinearMultilevel,
    BinomialEquicorr,
    BinomialArma22,
    LongitudinalIntro,
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub cluster: Option<String>,
    pub response: Option<String>,
    pub covariates: Vec<String>,
    #[serde(default)]
    pub intercept: bool,
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    /// Coefficient name (`intercept` or a covariate).
    pub coefficient: Option<String>,
    pub contrast: Option<Vec<f64>>,
    /// Covariate row for a delta-method prediction `g^{-1}(x0' beta)`.
    pub prediction_at: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StructureSection {
    pub kind: StructureKind,
    pub scale: Option<ScaleName>,
    pub p: Option<usize>,
    pub q: Option<usize>,
    /// Covariate splitting the two-piece variance.
    pub column: Option<String>,
    pub random_intercept: Option<bool>,
    #[serde(default)]
    pub random_slopes: Vec<String>,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CandidateSection {
    pub label: String,
    pub structure: StructureSection,
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub restarts: Option<usize>,
    pub init_scale: Option<f64>,
    pub tol: Option<f64>,
    pub max_evals: Option<usize>,
    pub max_rounds: Option<usize>,
    pub gamma_tol: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    pub dgp: DgpName,
    pub lambda: Option<f64>,
    pub clusters: Vec<usize>,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    pub label: String,
    pub objective: String,
    pub structure: StructureSection,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub replications: usize,
    pub designs: Vec<DesignSection>,
    #[serde(default)]
    pub methods: Vec<MethodSection>,
    pub delimiter: Option<char>,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleSection {
    pub tau: Option<f64>,
    pub sigma2: Option<f64>,
    pub c_tilde: Option<f64>,
    pub deltas: Vec<f64>,
    pub eta: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub dgp: DgpName,
    pub lambda: Option<f64>,
    pub clusters: usize,
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub family: Option<FamilyName>,
    pub link: Option<LinkName>,
    /// Objective for `select`.
    pub objective: Option<String>,
    /// Objectives compared by `fit`; the unweighted fit is always added.
    pub objectives: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub jackknife_steps: Option<usize>,
    pub data: Option<DataSection>,
    pub target: Option<TargetSection>,
    pub structure: Option<StructureSection>,
    pub candidates: Option<Vec<CandidateSection>>,
    pub optimizer: Option<OptimizerSection>,
    pub simulate: Option<SimulateSection>,
    pub counterexample: Option<CounterexampleSection>,
    pub generate: Option<GenerateSection>,
}

/// A parsed configuration with its source digest.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub digest: String,
}

pub fn parse_config(text: &str) -> Result<LoadedConfig> {
    let config: RunConfig = toml::from_str(text).map_err(cfg)?;
    Ok(LoadedConfig { config, digest: hex::encode(Sha256::digest(text.as_bytes())) })
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Settings shared by `fit` and `select`, resolved before data are read.
#[derive(Clone, Debug)]
pub struct ModelSetup {
    pub family: GlmFamily,
    pub columns: DataColumns,
    pub target: TargetContrast,
    pub prediction: Option<TargetContrast>,
    pub optimizer: OptimizerSettings,
    pub steps: usize,
}

pub fn parse_objective(name: &str) -> Result<ObjectiveKind> {
    name.parse::<ObjectiveKind>().map_err(cfg)
}

impl RunConfig {
    pub fn family(&self) -> Result<GlmFamily> {
        let fam = match self.family.unwrap_or(FamilyName::Gaussian) {
            FamilyName::Gaussian => GlmFamily::gaussian(),
            FamilyName::Binomial => GlmFamily::binomial(),
            FamilyName::Poisson => GlmFamily::poisson(),
        };
        Ok(match self.link {
            None => fam,
            Some(l) => {
                let link = match l {
                    LinkName::Identity => Link::Identity,
                    LinkName::Logit => Link::Logit,
                    LinkName::Log => Link::Log,
                };
                if fam.variance == VarianceFn::Binomial && link == Link::Log {
                    return Err(CliError::Config("log link with binomial variance is not supported".into()));
                }
                GlmFamily::new(link, fam.variance)
            }
        })
    }

    pub fn optimizer(&self) -> Result<OptimizerSettings> {
        let mut s = OptimizerSettings { seed: self.seed.unwrap_or(0), ..Default::default() };
        if let Some(o) = &self.optimizer {
            s.restarts = o.restarts.unwrap_or(s.restarts);
            s.init_scale = o.init_scale.unwrap_or(s.init_scale);
            s.tol = o.tol.unwrap_or(s.tol);
            s.max_evals = o.max_evals.unwrap_or(s.max_evals);
            s.max_rounds = o.max_rounds.unwrap_or(s.max_rounds);
            s.gamma_tol = o.gamma_tol.unwrap_or(s.gamma_tol);
        }
        if s.restarts == 0 || s.max_evals == 0 || s.max_rounds == 0 || !(s.init_scale > 0.0 && s.tol > 0.0 && s.gamma_tol > 0.0) {
            return Err(CliError::Config("optimizer counts and tolerances must be positive".into()));
        }
        Ok(s)
    }

    pub fn columns(&self) -> Result<DataColumns> {
        let d = self.data.as_ref().ok_or_else(|| CliError::Config("missing [data] table".into()))?;
        let cols = DataColumns {
            cluster: d.cluster.clone().unwrap_or_else(|| "cluster".into()),
            response: d.response.clone().unwrap_or_else(|| "y".into()),
            covariates: d.covariates.clone(),
            intercept: d.intercept,
        };
        let names = cols.coefficient_names();
        if names.is_empty() {
            return Err(CliError::Config("no covariates and no intercept".into()));
        }
        for (k, n) in names.iter().enumerate() {
            if names[..k].contains(n) {
                return Err(CliError::Config(format!("duplicate covariate `{n}`")));
            }
        }
        Ok(cols)
    }

    pub fn model_setup(&self) -> Result<ModelSetup> {
        let family = self.family()?;
        let columns = self.columns()?;
        let names = columns.coefficient_names();
        let p = names.len();
        let t = self.target.clone().unwrap_or_default();
        let target = match (&t.coefficient, &t.contrast) {
            (Some(name), None) => {
                let k = names.iter().position(|n| n == name).ok_or_else(|| CliError::Config(format!("unknown target coefficient `{name}`")))?;
                TargetContrast::coordinate(p, k).map_err(cfg)?
            }
            (None, Some(c)) if c.len() == p => TargetContrast::new(DVector::from_vec(c.clone())).map_err(cfg)?,
            (None, Some(c)) => return Err(CliError::Config(format!("target contrast has length {}, expected {p}", c.len()))),
            (None, None) => return Err(CliError::Config("[target] needs `coefficient` or `contrast`".into())),
            (Some(_), Some(_)) => return Err(CliError::Config("[target] takes `coefficient` or `contrast`, not both".into())),
        };
        let prediction = match &t.prediction_at {
            None => None,
            Some(x) if x.len() == p => Some(TargetContrast::new(DVector::from_vec(x.clone())).map_err(cfg)?),
            Some(x) => return Err(CliError::Config(format!("prediction_at has length {}, expected {p}", x.len()))),
        };
        Ok(ModelSetup { family, columns, target, prediction, optimizer: self.optimizer()?, steps: self.jackknife_steps.unwrap_or(1) })
    }

    pub fn structure(&self, family: &GlmFamily, names: &[String]) -> Result<CovarianceStructure> {
        let s = self.structure.as_ref().ok_or_else(|| CliError::Config("missing [structure] table".into()))?;
        s.resolve(family, names)
    }

    pub fn fit_objectives(&self) -> Result<Vec<ObjectiveKind>> {
        let names = self.objectives.clone().unwrap_or_else(|| vec!["sandwich".into(), "eqml".into(), "gee".into()]);
        let mut out = vec![ObjectiveKind::Unweighted];
        for n in &names {
            let k = parse_objective(n)?;
            if !out.contains(&k) {
                out.push(k);
            }
        }
        Ok(out)
    }

    pub fn select_objective(&self) -> Result<ObjectiveKind> {
        parse_objective(self.objective.as_deref().unwrap_or("sandwich"))
    }

    pub fn candidates(&self, family: &GlmFamily, names: &[String]) -> Result<Vec<(String, CovarianceStructure)>> {
        let c = self.candidates.as_ref().filter(|c| !c.is_empty()).ok_or_else(|| CliError::Config("no [[candidates]] given".into()))?;
        let mut out: Vec<(String, CovarianceStructure)> = Vec::with_capacity(c.len());
        for cand in c {
            if out.iter().any(|(l, _)| *l == cand.label) {
                return Err(CliError::Config(format!("duplicate candidate label `{}`", cand.label)));
            }
            out.push((cand.label.clone(), cand.structure.resolve(family, names)?));
        }
        Ok(out)
    }

    pub fn simulation(&self) -> Result<(Vec<DgpSpec>, Vec<MethodSpec>, usize, char)> {
        let s = self.simulate.as_ref().ok_or_else(|| CliError::Config("missing [simulate] table".into()))?;
        if s.replications < 2 {
            return Err(CliError::Config("simulate.replications must be at least 2".into()));
        }
        let mut dgps = Vec::new();
        for d in &s.designs {
            if d.clusters.is_empty() {
                return Err(CliError::Config("design with empty `clusters` list".into()));
            }
            for &n in &d.clusters {
                dgps.push(design(d.dgp, d.lambda, n)?);
            }
        }
        if dgps.is_empty() {
            return Err(CliError::Config("no simulation designs".into()));
        }
        let names = vec!["x1".to_string()];
        let mut methods: Vec<MethodSpec> = Vec::new();
        for m in &s.methods {
            if methods.iter().any(|x| x.label == m.label) {
                return Err(CliError::Config(format!("duplicate method label `{}`", m.label)));
            }
            let kind = parse_objective(&m.objective)?;
            // every generated design has a single covariate
            let family = GlmFamily::gaussian();
            methods.push(MethodSpec::new(m.label.clone(), kind, m.structure.resolve(&family, &names)?));
        }
        Ok((dgps, methods, s.replications, s.delimiter.unwrap_or(',')))
    }

    pub fn counterexample(&self) -> Result<(Vec<CounterexampleSpec>, Option<f64>)> {
        let c = self.counterexample.as_ref().ok_or_else(|| CliError::Config("missing [counterexample] table".into()))?;
        if c.deltas.is_empty() && c.eta.is_none() {
            return Err(CliError::Config("[counterexample] needs `deltas` or `eta`".into()));
        }
        let (tau, sigma2, ct) = (c.tau.unwrap_or(1.0), c.sigma2.unwrap_or(1.0), c.c_tilde.unwrap_or(0.5));
        CounterexampleSpec::new(tau, sigma2, ct, 1.0).map_err(cfg)?;
        let specs = c.deltas.iter().map(|&d| CounterexampleSpec::new(tau, sigma2, ct, d).map_err(cfg)).collect::<Result<Vec<_>>>()?;
        if let Some(eta) = c.eta {
            if !(eta >= 1.0 && eta.is_finite()) {
                return Err(CliError::Config(format!("eta must be >= 1, got {eta}")));
            }
        }
        Ok((specs, c.eta))
    }

    pub fn generation(&self) -> Result<DgpSpec> {
        let g = self.generate.as_ref().ok_or_else(|| CliError::Config("missing [generate] table".into()))?;
        design(g.dgp, g.lambda, g.clusters)
    }
}

fn design(dgp: DgpName, lambda: Option<f64>, clusters: usize) -> Result<DgpSpec> {
    let kind = match dgp {
        DgpName::LinearMultilevel => DgpKind::LinearMultilevel {
            lambda: lambda.ok_or_else(|| CliError::Config("linear_multilevel needs `lambda`".into()))?,
        },
        other => {
            if lambda.is_some() {
                return Err(CliError::Config(format!("`lambda` applies only to linear_multilevel, not {other:?}")));
            }
            match other {
                DgpName::BinomialEquicorr => DgpKind::BinomialCopula(Latent::Equicorr),
                DgpName::BinomialArma22 => DgpKind::BinomialCopula(Latent::Arma22),
                _ => DgpKind::LongitudinalIntro,
            }
        }
    };
    DgpSpec::new(kind, clusters).map_err(cfg)
}

impl StructureSection {
    pub fn resolve(&self, family: &GlmFamily, names: &[String]) -> Result<CovarianceStructure> {
        let column = |n: &str| names.iter().position(|c| c == n).ok_or_else(|| CliError::Config(format!("unknown column `{n}`")));
        let scale = match self.scale {
            Some(ScaleName::Unit) => ScaleMode::Unit,
            Some(ScaleName::Free) => ScaleMode::Free,
            None => ScaleMode::default_for(family),
        };
        let extra = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(CliError::Config(format!("`{what}` does not apply to structure {:?}", self.kind)))
            }
        };
        extra(self.p.is_none() && self.q.is_none() || self.kind == StructureKind::Arma, "p/q")?;
        extra(self.column.is_none() || self.kind == StructureKind::TwoPiece, "column")?;
        extra(
            (self.random_intercept.is_none() && self.random_slopes.is_empty()) || self.kind == StructureKind::RandomEffects,
            "random_intercept/random_slopes",
        )?;
        let s = match self.kind {
            StructureKind::Independence => CovarianceStructure::new(CorrelationKind::Independence, scale),
            StructureKind::Exchangeable => Ok(CovarianceStructure::exchangeable(scale)),
            StructureKind::Ar1 => Ok(CovarianceStructure::ar1(scale)),
            StructureKind::Arma => CovarianceStructure::arma(self.p.unwrap_or(0), self.q.unwrap_or(0), scale),
            StructureKind::RandomEffects => {
                let terms = self.random_slopes.iter().map(|n| column(n).map(|c| (c, 1u32))).collect::<Result<Vec<_>>>()?;
                CovarianceStructure::random_effects(RandomEffectsDesign { intercept: self.random_intercept.unwrap_or(true), terms })
            }
            StructureKind::TwoPiece => {
                let name = self.column.as_deref().ok_or_else(|| CliError::Config("two_piece needs `column`".into()))?;
                Ok(CovarianceStructure::two_piece(column(name)?))
            }
        }
        .map_err(cfg)?;
        s.validate_for(names.len()).map_err(cfg)?;
        Ok(s)
    }
}
