//! CSV files. Reals are written with 17 significant digits, so they read
//! back bit-exact. Header lines starting with `#` carry provenance such as
//! the master seed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pboem_core::TraceRecord;

use crate::stats::Summary;
use crate::CliError;

pub fn real(v: f64) -> String {
    format!("{v:.16e}")
}

/// A CSV file under construction: `#` comment lines, then a header row.
pub struct CsvFile {
    path: PathBuf,
    inner: csv::Writer<BufWriter<File>>,
}

impl CsvFile {
    pub fn create(path: &Path, comments: &[String], header: &[String]) -> Result<Self, CliError> {
        let io = |source| CliError::Io { path: path.to_path_buf(), source };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        for c in comments {
            writeln!(w, "# {c}").map_err(io)?;
        }
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(header).map_err(|e| CliError::csv(path, e))?;
        Ok(CsvFile { path: path.to_path_buf(), inner })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<(), CliError> {
        self.inner
            .write_record(fields)
            .map_err(|e| CliError::csv(&self.path, e))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.inner.flush().map_err(|source| CliError::Io { path: self.path.clone(), source })
    }
}

pub fn numbered(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("{prefix}_{i}")).collect()
}

pub fn trace_header(d: usize) -> Vec<String> {
    let mut h: Vec<String> = ["replication", "block", "T_n", "tau_n", "N_n"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend(numbered("theta", d));
    h.extend(numbered("theta_avg", d));
    h
}

/// One trace file per replication. Row 0 (`θ_0`) goes into a comment.
pub fn write_trace(
    path: &Path,
    master_seed: u64,
    replication: u64,
    records: &[TraceRecord<f64>],
) -> Result<(), CliError> {
    let d = records[0].theta.len();
    let theta0: Vec<String> = records[0].theta.iter().map(|v| real(*v)).collect();
    let comments = vec![
        format!("master_seed = {master_seed}"),
        format!("replication = {replication}"),
        format!("theta_0 = {}", theta0.join(" ")),
    ];
    let mut f = CsvFile::create(path, &comments, &trace_header(d))?;
    for r in &records[1..] {
        let mut row = vec![
            replication.to_string(),
            r.block.to_string(),
            r.elapsed.to_string(),
            r.tau.to_string(),
            r.particles.to_string(),
        ];
        row.extend(r.theta.iter().map(|v| real(*v)));
        row.extend(r.theta_avg.iter().map(|v| real(*v)));
        f.row(&row)?;
    }
    f.finish()
}

pub fn summary_header(prefix: &str, d: usize) -> Vec<String> {
    (1..=d)
        .flat_map(|i| {
            ["median", "q25", "q75", "var"]
                .iter()
                .map(move |s| format!("{prefix}_{i}_{s}"))
        })
        .collect()
}

pub fn summary_fields(s: &[Summary]) -> Vec<String> {
    s.iter()
        .flat_map(|s| [s.median, s.q25, s.q75, s.var])
        .map(real)
        .collect()
}
