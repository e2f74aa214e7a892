//! CSV ingestion and emission of clustered data.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sandreg::{ClusterData, ClusterDataset};

use crate::error::{CliError, Result};

/// Column roles in an input file.
#[derive(Clone, Debug, PartialEq)]
pub struct DataColumns {
    pub cluster: String,
    pub response: String,
    pub covariates: Vec<String>,
    /// Prepend a column of ones named `intercept`.
    pub intercept: bool,
}

impl DataColumns {
    /// Names of the design-matrix columns in order.
    pub fn coefficient_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.covariates.len() + 1);
        if self.intercept {
            out.push("intercept".to_string());
        }
        out.extend(self.covariates.iter().cloned());
        out
    }
}

/// A dataset with the cluster identifiers it was read with.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub dataset: ClusterDataset,
    pub cluster_ids: Vec<String>,
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Err(CliError::Data(format!("missing value in row {row}, column `{column}`")));
    }
    let v: f64 = s.parse().map_err(|_| CliError::Data(format!("non-numeric value `{s}` in row {row}, column `{column}`")))?;
    if !v.is_finite() {
        return Err(CliError::Data(format!("non-finite value in row {row}, column `{column}`")));
    }
    Ok(v)
}

/// Reads rows from `reader`, grouping them by cluster id in order of first
/// appearance and keeping file order within each cluster. Row numbers in errors
/// count data rows from 1. Lines starting with `#` are skipped.
pub fn ingest_reader<R: Read>(reader: R, columns: &DataColumns) -> Result<LoadedData> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| CliError::Data(format!("cannot read header: {e}")))?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| CliError::Data(format!("column `{name}` not found in header")))
    };
    let c_idx = find(&columns.cluster)?;
    let y_idx = find(&columns.response)?;
    let x_idx = columns.covariates.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut lookup: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<Vec<(f64, Vec<f64>)>> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| CliError::Data(format!("row {row}: {e}")))?;
        let id = rec.get(c_idx).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(CliError::Data(format!("missing value in row {row}, column `{}`", columns.cluster)));
        }
        let y = parse_cell(rec.get(y_idx).unwrap_or(""), row, &columns.response)?;
        let mut x = Vec::with_capacity(x_idx.len() + 1);
        if columns.intercept {
            x.push(1.0);
        }
        for (j, idx) in x_idx.iter().enumerate() {
            x.push(parse_cell(rec.get(*idx).unwrap_or(""), row, &columns.covariates[j])?);
        }
        let slot = *lookup.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            rows.push(Vec::new());
            rows.len() - 1
        });
        rows[slot].push((y, x));
    }
    if rows.is_empty() {
        return Err(CliError::Data("no data rows".into()));
    }
    let p = columns.coefficient_names().len();
    let clusters = rows
        .into_iter()
        .map(|r| {
            let y = DVector::from_iterator(r.len(), r.iter().map(|(y, _)| *y));
            let x = DMatrix::from_fn(r.len(), p, |i, j| r[i].1[j]);
            ClusterData::new(y, x).map_err(CliError::from)
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = ClusterDataset::new(clusters).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(LoadedData { dataset, cluster_ids: order })
}

pub fn ingest_csv(path: &Path, columns: &DataColumns) -> Result<LoadedData> {
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
    ingest_reader(std::io::BufReader::new(f), columns)
}

/// Writes `cluster,y,x1..xp` rows with 17 significant digits.
pub fn emit_dataset<W: Write>(dataset: &ClusterDataset, cluster_ids: &[String], names: &[String], out: W) -> Result<()> {
    if cluster_ids.len() != dataset.num_clusters() || names.len() != dataset.p() {
        return Err(CliError::Data("cluster ids or column names do not match the dataset".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["cluster".to_string(), "y".to_string()];
    header.extend(names.iter().cloned());
    let werr = |e: csv::Error| CliError::Data(format!("write failed: {e}"));
    w.write_record(&header).map_err(werr)?;
    for (id, c) in cluster_ids.iter().zip(dataset.clusters()) {
        for j in 0..c.len() {
            let mut rec = vec![id.clone(), format!("{:.16e}", c.y()[j])];
            rec.extend((0..c.p()).map(|k| format!("{:.16e}", c.x()[(j, k)])));
            w.write_record(&rec).map_err(werr)?;
        }
    }
    w.flush().map_err(|e| CliError::io("output", e))?;
    Ok(())
}

/// Default column names `x1..xp`.
pub fn default_names(p: usize) -> Vec<String> {
    (1..=p).map(|k| format!("x{k}")).collect()
}
