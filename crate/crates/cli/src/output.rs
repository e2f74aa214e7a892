//! Deterministic delimited tables with a provenance preamble.

use crate::error::{CliError, Result};

/// Fixed-width scientific notation (17 significant digits) or `NA`.
pub fn num(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => format!("{v:.16e}"),
        Some(v) => format!("{v}"),
        None => "NA".to_string(),
    }
}

/// Lines `# sandreg <version>`, `# command <name>` and one line per digest.
pub fn preamble(command: &str, digests: &[(&str, &str)]) -> String {
    let mut s = format!("# sandreg {}\n# command {command}\n", env!("CARGO_PKG_VERSION"));
    for (k, v) in digests {
        s.push_str(&format!("# {k} {v}\n"));
    }
    s
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self, delimiter: char) -> Result<String> {
        let d = u8::try_from(delimiter).map_err(|_| CliError::Config(format!("delimiter {delimiter:?} is not ASCII")))?;
        let mut w = csv::WriterBuilder::new().delimiter(d).from_writer(Vec::new());
        let werr = |e: csv::Error| CliError::Data(format!("write failed: {e}"));
        w.write_record(&self.header).map_err(werr)?;
        for r in &self.rows {
            w.write_record(r).map_err(werr)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Data(format!("write failed: {e}")))?;
        String::from_utf8(bytes).map_err(|e| CliError::Data(e.to_string()))
    }
}
