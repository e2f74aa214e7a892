//! Subcommand implementations. Each resolves the whole configuration before
//! reading any data.

use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use sandreg::counterexample::{divergence_ratio, find_delta_for_eta, Law, QuadratureSettings};
use sandreg::inference::ModelCandidate;
use sandreg::sim::{replication_rng, run_mse_experiment, ExperimentSettings};
use sandreg::{
    delta_method_variance, jackknife_variance, minimize_dispersion, select_model, CovarianceStructure, DispersionObjective,
    DispersionParams, ObjectiveKind, SandregFit, VarianceEstimate,
};

use crate::config::LoadedConfig;
use crate::data::{default_names, emit_dataset, ingest_reader, LoadedData};
use crate::error::{CliError, Result};
use crate::output::{num, preamble, Table};

/// Machine-readable body (preamble included) and a short human summary.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub body: String,
    pub summary: String,
}

fn read_data(path: &Path, columns: &crate::data::DataColumns) -> Result<(LoadedData, String)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    Ok((ingest_reader(&bytes[..], columns)?, digest))
}

fn gamma_string(structure: &CovarianceStructure, gamma: &DispersionParams) -> String {
    structure
        .param_names()
        .iter()
        .zip(gamma.0.iter())
        .map(|(n, v)| format!("{n}={}", num(Some(*v))))
        .collect::<Vec<_>>()
        .join(";")
}

struct MethodFit {
    fit: SandregFit,
    var: VarianceEstimate,
}

/// `fit`: every configured objective plus the unweighted baseline.
pub fn fit(config: &LoadedConfig, data: &Path) -> Result<Report> {
    let c = &config.config;
    let setup = c.model_setup()?;
    let names = setup.columns.coefficient_names();
    let structure = c.structure(&setup.family, &names)?;
    let kinds = c.fit_objectives()?;
    let (loaded, data_digest) = read_data(data, &setup.columns)?;
    let ds = &loaded.dataset;

    let mut fits: Vec<(ObjectiveKind, MethodFit)> = Vec::with_capacity(kinds.len());
    for &kind in &kinds {
        let st = if kind == ObjectiveKind::Unweighted { CovarianceStructure::independence() } else { structure.clone() };
        let objective = DispersionObjective::new(kind, kind.is_sandwich().then(|| setup.target.clone()))?;
        let fit = minimize_dispersion(ds, &setup.family, &st, &objective, &setup.optimizer)?;
        let var = jackknife_variance(&fit, ds, &setup.family, &objective, setup.steps)?;
        log::info!("{kind}: value {:.6e}, {} evaluations", fit.value, fit.evaluations);
        fits.push((kind, MethodFit { fit, var }));
    }

    // (quantity, estimate, variance) for one fit
    let quantities = |m: &MethodFit| -> Vec<(String, f64, f64)> {
        let mut q = vec![("target".to_string(), setup.target.vector().dot(&m.fit.beta), m.var.variance(&setup.target))];
        if let Some(x0) = &setup.prediction {
            let eta = x0.vector().dot(&m.fit.beta);
            q.push((
                "prediction".to_string(),
                setup.family.link.inverse(eta),
                delta_method_variance(&m.fit.beta, &m.var.vhat, x0, &setup.family),
            ));
        }
        for (k, n) in names.iter().enumerate() {
            q.push((format!("coef:{n}"), m.fit.beta[k], m.var.vhat[(k, k)]));
        }
        q
    };
    let baseline = quantities(&fits[0].1);

    let mut table = Table::new(&[
        "method",
        "structure",
        "quantity",
        "estimate",
        "se",
        "variance",
        "variance_reduction_pct",
        "objective_value",
        "converged",
        "gamma",
    ]);
    let mut summary = String::new();
    for (kind, m) in &fits {
        for (k, (q, est, v)) in quantities(m).into_iter().enumerate() {
            let reduction = 100.0 * (1.0 - v / baseline[k].2);
            if k == 0 {
                summary.push_str(&format!(
                    "{:<22} {:<22} estimate {est:>12.6} se {:>10.4e} reduction {reduction:>7.2}%\n",
                    kind.label(),
                    m.fit.structure.label(),
                    v.max(0.0).sqrt()
                ));
            }
            table.push(vec![
                kind.label().to_string(),
                m.fit.structure.label(),
                q,
                num(Some(est)),
                num(Some(v.max(0.0).sqrt())),
                num(Some(v)),
                num(Some(reduction)),
                num(Some(m.fit.value)),
                m.fit.converged.to_string(),
                gamma_string(&m.fit.structure, &m.fit.gamma),
            ]);
        }
    }
    let pre = preamble("fit", &[("config_sha256", &config.digest), ("data_sha256", &data_digest)]);
    Ok(Report { body: pre + &table.render(',')?, summary })
}

/// `select`: fit every candidate and keep the one with the smallest jackknife variance.
pub fn select(config: &LoadedConfig, data: &Path) -> Result<Report> {
    let c = &config.config;
    let setup = c.model_setup()?;
    let names = setup.columns.coefficient_names();
    let candidates = c.candidates(&setup.family, &names)?;
    let kind = c.select_objective()?;
    if kind == ObjectiveKind::Unweighted {
        return Err(CliError::Config("select needs a weighted objective".into()));
    }
    let (loaded, data_digest) = read_data(data, &setup.columns)?;
    let cands: Vec<ModelCandidate<f64>> = candidates.iter().map(|(l, s)| ModelCandidate::new(l.clone(), s.clone())).collect();
    let sel = select_model(&cands, &loaded.dataset, &setup.family, kind, &setup.target, &setup.optimizer, setup.steps)?;

    let mut table = Table::new(&["label", "structure", "variance", "selected", "gamma", "error"]);
    for ((row, (_, s)), fit) in sel.rows.iter().zip(&candidates).zip(&sel.fits) {
        table.push(vec![
            row.label.clone(),
            s.label(),
            num(row.variance),
            row.selected.to_string(),
            row.gamma.as_ref().map(|g| gamma_string(s, g)).unwrap_or_default(),
            row.error.clone().unwrap_or_default(),
        ]);
        debug_assert_eq!(fit.is_some(), row.error.is_none());
    }
    let k = sel.rows.iter().position(|r| r.selected).expect("a selected row");
    let best = sel.fits[k].as_ref().expect("selected fit");
    let summary = format!(
        "selected {} ({}): target estimate {:.6}, variance {:.4e}\n",
        sel.selected,
        best.structure.label(),
        setup.target.vector().dot(&best.beta),
        sel.rows[k].variance.unwrap_or(f64::NAN)
    );
    let pre = preamble("select", &[("config_sha256", &config.digest), ("data_sha256", &data_digest)]);
    Ok(Report { body: pre + &table.render(',')?, summary })
}

/// `simulate`: Monte Carlo MSE ratios against the unweighted estimator.
pub fn simulate(config: &LoadedConfig) -> Result<Report> {
    let c = &config.config;
    let (dgps, methods, reps, delimiter) = c.simulation()?;
    if methods.is_empty() {
        return Err(CliError::Config("[simulate] needs at least one method".into()));
    }
    u8::try_from(delimiter).map_err(|_| CliError::Config(format!("delimiter {delimiter:?} is not ASCII")))?;
    let settings = ExperimentSettings { replications: reps, root_seed: c.seed.unwrap_or(0), optimizer: c.optimizer()? };
    let report = run_mse_experiment(&dgps, &methods, &settings)?;
    let mut summary = String::new();
    for r in &report.rows {
        summary.push_str(&format!("{:<32} {:<20} mse ratio {:.4} (se {:.4})\n", r.dgp, r.method, r.mse_ratio, r.mc_se));
    }
    Ok(Report { body: preamble("simulate", &[("config_sha256", &config.digest)]) + &report.to_table(delimiter), summary })
}

/// `counterexample`: divergence of the EQML sandwich variance along a sweep of `delta`.
pub fn counterexample(config: &LoadedConfig) -> Result<Report> {
    let (specs, eta) = config.config.counterexample()?;
    let settings = QuadratureSettings::default();
    let mut points: Vec<(&str, sandreg::counterexample::CounterexampleSpec)> = specs.iter().map(|s| ("sweep", *s)).collect();
    if let Some(eta) = eta {
        let base = config.config.counterexample.as_ref().expect("validated");
        let (tau, sigma2, ct) = (base.tau.unwrap_or(1.0), base.sigma2.unwrap_or(1.0), base.c_tilde.unwrap_or(0.5));
        let d = find_delta_for_eta(tau, sigma2, ct, eta, &settings)?;
        points.push(("delta_star", sandreg::counterexample::CounterexampleSpec::new(tau, sigma2, ct, d)?));
    }
    let rows = points
        .par_iter()
        .map(|(role, spec)| {
            let r = divergence_ratio(spec, &settings)?;
            let kl = Law::new(*spec, settings)?.kl_integral(spec.c_tilde)?;
            Ok((*role, r, kl))
        })
        .collect::<sandreg::Result<Vec<_>>>()?;

    let mut table = Table::new(&[
        "role",
        "delta",
        "b_delta",
        "lower_bound",
        "ratio",
        "two_piece_ratio",
        "gamma1_eqml",
        "gamma2_eqml",
        "gamma1_two_piece",
        "gamma2_two_piece",
        "v_eqml",
        "v_opt",
        "v_two_piece",
        "kl",
    ]);
    let mut summary = String::new();
    for (role, r, kl) in &rows {
        summary.push_str(&format!("{role:<10} delta {:>12.4} ratio {:>12.4} bound {:>12.4}\n", r.delta, r.ratio, r.lower_bound));
        table.push(
            std::iter::once(role.to_string())
                .chain(
                    [
                        r.delta,
                        r.b_delta,
                        r.lower_bound,
                        r.ratio,
                        r.two_piece_ratio,
                        r.gamma_eqml.0,
                        r.gamma_eqml.1,
                        r.gamma_two_piece.0,
                        r.gamma_two_piece.1,
                        r.v_eqml,
                        r.v_opt,
                        r.v_two_piece,
                        *kl,
                    ]
                    .into_iter()
                    .map(|v| num(Some(v))),
                )
                .collect(),
        );
    }
    Ok(Report { body: preamble("counterexample", &[("config_sha256", &config.digest)]) + &table.render(',')?, summary })
}

/// `generate`: one dataset from a simulation design, as CSV.
pub fn generate(config: &LoadedConfig) -> Result<Report> {
    let spec = config.config.generation()?;
    let mut rng = replication_rng(config.config.seed.unwrap_or(0), 0, 0);
    let ds = spec.generate(&mut rng)?;
    let ids: Vec<String> = (1..=ds.num_clusters()).map(|i| format!("c{i}")).collect();
    let mut buf = Vec::new();
    emit_dataset(&ds, &ids, &default_names(ds.p()), &mut buf)?;
    let body = preamble("generate", &[("config_sha256", &config.digest)]) + &String::from_utf8(buf).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(Report { body, summary: format!("{}: {} clusters, {} rows\n", spec.kind, ds.num_clusters(), ds.n_total()) })
}

