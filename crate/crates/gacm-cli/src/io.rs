//! File plumbing: CSV tables, content digests, and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use gacm::model::DataSet;
use gacm::{Error, Result};
use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => io_err(path, source),
            _ => unreachable!("is_io_error guarantees an io kind"),
        }
    } else {
        Error::Data(format!("{}: {e}", path.display()))
    }
}

/// Read a CSV file with a header row into named numeric columns.
pub fn read_dataset(path: &Path) -> Result<DataSet<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() {
        return Err(Error::Data(format!("{}: no columns", path.display())));
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "{}: line {} has {} fields, expected {}",
                path.display(),
                r + 2,
                record.len(),
                headers.len()
            )));
        }
        for (c, field) in record.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| {
                Error::Data(format!(
                    "{}: column '{}' line {}: '{}' is not a number",
                    path.display(),
                    headers[c],
                    r + 2,
                    field
                ))
            })?;
            columns[c].push(value);
        }
    }
    DataSet::from_columns(headers, columns)
}

/// Write a data table as CSV, one named column per variable.
pub fn write_dataset(path: &Path, data: &DataSet<f64>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    writer
        .write_record(data.names())
        .map_err(|e| csv_err(path, e))?;
    let columns: Vec<&[f64]> = data
        .names()
        .iter()
        .map(|name| data.column(name).expect("listed column exists"))
        .collect();
    let mut record: Vec<String> = Vec::with_capacity(columns.len());
    for i in 0..data.n() {
        record.clear();
        record.extend(columns.iter().map(|col| format!("{}", col[i])));
        writer.write_record(&record).map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Column names of a per-observation moment table: means `mu1..mud`, then
/// the covariance lower triangle (diagonal included) row by row as
/// `sigma_<row>_<col>` with 1-based indices.
pub fn moment_headers(d: usize) -> Vec<String> {
    let mut headers: Vec<String> = (1..=d).map(|j| format!("mu{j}")).collect();
    for row in 1..=d {
        for col in 1..=row {
            headers.push(format!("sigma_{row}_{col}"));
        }
    }
    headers
}

/// Write per-observation means and half-vectorized covariances as CSV.
pub fn write_moments(path: &Path, mu: &DMatrix<f64>, sigma_rvech: &DMatrix<f64>) -> Result<()> {
    let d = mu.ncols();
    assert_eq!(sigma_rvech.ncols(), d * (d + 1) / 2);
    assert_eq!(sigma_rvech.nrows(), mu.nrows());
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    writer
        .write_record(moment_headers(d))
        .map_err(|e| csv_err(path, e))?;
    let mut record: Vec<String> = Vec::with_capacity(d + sigma_rvech.ncols());
    for i in 0..mu.nrows() {
        record.clear();
        record.extend((0..d).map(|j| format!("{}", mu[(i, j)])));
        record.extend((0..sigma_rvech.ncols()).map(|c| format!("{}", sigma_rvech[(i, c)])));
        writer.write_record(&record).map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Write a two-column index/value CSV (coefficients, smoothing parameters).
pub fn write_indexed(path: &Path, value_name: &str, values: &[f64]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    writer
        .write_record(["index", value_name])
        .map_err(|e| csv_err(path, e))?;
    for (i, v) in values.iter().enumerate() {
        writer
            .write_record([format!("{}", i + 1), format!("{v}")])
            .map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a file's raw bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Digest of a JSON document's canonical (compact, parsed) form, so
/// formatting differences do not change the hash.
pub fn json_digest(text: &str) -> Result<String> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
    let canonical =
        serde_json::to_string(&value).map_err(|e| Error::Config(format!("cannot hash: {e}")))?;
    Ok(sha256_hex(canonical.as_bytes()))
}

/// Record of one command invocation, written next to the outputs.
///
/// `digest` is a stable hash over the command, input digests, seed, version,
/// and output list; wall-clock timings and auxiliary statistics are excluded
/// so reruns on identical inputs produce identical digests.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    /// Input name -> sha256 of canonicalized content.
    pub inputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub version: String,
    pub outputs: Vec<String>,
    pub digest: String,
    pub timings_s: BTreeMap<String, f64>,
    /// Non-hashed extras (e.g. summary statistics of generated data).
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(
        command: &str,
        inputs: BTreeMap<String, String>,
        seed: Option<u64>,
        outputs: Vec<String>,
    ) -> Manifest {
        let version = env!("CARGO_PKG_VERSION").to_string();
        let core = serde_json::to_string(&(command, &inputs, seed, &version, &outputs))
            .expect("digest core serializes");
        Manifest {
            command: command.to_string(),
            inputs,
            seed,
            version,
            outputs,
            digest: sha256_hex(core.as_bytes()),
            timings_s: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn timing(&mut self, stage: &str, seconds: f64) {
        self.timings_s.insert(stage.to_string(), seconds);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize manifest: {e}")))?;
        fs::write(path, text + "\n").map_err(|e| io_err(path, e))
    }
}
