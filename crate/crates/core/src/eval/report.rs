//! Structured experiment reports and their JSON/CSV serialization.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::container::write_file;
use crate::error::{Error, Result};

/// One measured value with the number of samples behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub value: f64,
    pub count: usize,
}

impl MetricCell {
    pub fn new(value: f64, count: usize) -> Self {
        Self { value, count }
    }

    /// `hits / total`, or a zero-count cell of value 0 when `total == 0`.
    pub fn ratio(hits: usize, total: usize) -> Self {
        let value = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
        Self { value, count: total }
    }
}

/// A named matrix of cells; `None` marks an omitted cell such as a diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub name: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub cells: Vec<Vec<Option<MetricCell>>>,
}

impl MetricTable {
    pub fn new(name: impl Into<String>, row_labels: Vec<String>, col_labels: Vec<String>) -> Self {
        let cells = vec![vec![None; col_labels.len()]; row_labels.len()];
        Self { name: name.into(), row_labels, col_labels, cells }
    }

    /// A single-column series.
    pub fn series(name: impl Into<String>, column: impl Into<String>, rows: Vec<(String, MetricCell)>) -> Self {
        let (labels, cells): (Vec<_>, Vec<_>) = rows.into_iter().map(|(l, c)| (l, vec![Some(c)])).unzip();
        Self { name: name.into(), row_labels: labels, col_labels: vec![column.into()], cells }
    }

    pub fn set(&mut self, row: usize, col: usize, cell: MetricCell) {
        self.cells[row][col] = Some(cell);
    }

    pub fn get(&self, row: usize, col: usize) -> Option<MetricCell> {
        self.cells[row][col]
    }

    pub fn rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn cols(&self) -> usize {
        self.col_labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.len() != self.rows() || self.cells.iter().any(|r| r.len() != self.cols()) {
            return Err(Error::Shape(format!("table {} cells do not match its {}x{} labels", self.name, self.rows(), self.cols())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub seed: u64,
    /// Fully materialized configuration of the run.
    pub config: Value,
    pub tables: Vec<MetricTable>,
    /// Model and dataset hashes.
    pub provenance: BTreeMap<String, String>,
    /// Wall-clock seconds; written to a separate file so reports stay reproducible.
    #[serde(skip)]
    pub timings: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new(experiment: impl Into<String>, seed: u64, config: Value) -> Self {
        Self {
            experiment: experiment.into(),
            seed,
            config,
            tables: Vec::new(),
            provenance: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn table(&self, name: &str) -> Option<&MetricTable> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn stem(&self) -> String {
        format!("{}-{}", sanitize(&self.experiment), self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '.' { c } else { '-' }).collect()
}

/// Flattens a JSON value into `(pointer, scalar)` rows in key order.
fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                flatten(&format!("{prefix}/{k}"), child, out);
            }
        }
        Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                flatten(&format!("{prefix}/{i}"), child, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn csv_bytes(rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// CSV for one table: header `row,col,value,count`, one line per cell.
pub fn table_csv(table: &MetricTable) -> Result<Vec<u8>> {
    table.validate()?;
    let mut rows = vec![vec!["row".to_string(), "col".into(), "value".into(), "count".into()]];
    for (i, rl) in table.row_labels.iter().enumerate() {
        for (j, cl) in table.col_labels.iter().enumerate() {
            let (v, c) = match table.cells[i][j] {
                Some(cell) => (cell.value.to_string(), cell.count.to_string()),
                None => (String::new(), String::new()),
            };
            rows.push(vec![rl.clone(), cl.clone(), v, c]);
        }
    }
    csv_bytes(rows)
}

/// Writes the report into `dir` and returns the files written.
///
/// JSON produces `<experiment>-<seed>.json`. CSV produces
/// `<experiment>-<seed>.csv` with the config echo and provenance as
/// `key,value` rows, plus `<experiment>-<seed>-<table>.csv` per table.
/// Timings, when present, go to `<experiment>-<seed>.timings.json`.
pub fn emit_report(report: &EvalReport, dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    for t in &report.tables {
        t.validate()?;
    }
    let stem = report.stem();
    let mut written = Vec::new();
    match format {
        ReportFormat::Json => {
            let p = dir.join(format!("{stem}.json"));
            let mut body = serde_json::to_string_pretty(report)?;
            body.push('\n');
            write_file(&p, body.as_bytes())?;
            written.push(p);
        }
        ReportFormat::Csv => {
            let mut rows = vec![vec!["key".to_string(), "value".to_string()]];
            rows.push(vec!["experiment".into(), report.experiment.clone()]);
            rows.push(vec!["seed".into(), report.seed.to_string()]);
            let mut flat = Vec::new();
            flatten("config", &report.config, &mut flat);
            for (k, v) in report.provenance.iter() {
                flat.push((format!("provenance/{k}"), v.clone()));
            }
            rows.extend(flat.into_iter().map(|(k, v)| vec![k, v]));
            let p = dir.join(format!("{stem}.csv"));
            write_file(&p, &csv_bytes(rows)?)?;
            written.push(p);
            for t in &report.tables {
                let p = dir.join(format!("{stem}-{}.csv", sanitize(&t.name)));
                write_file(&p, &table_csv(t)?)?;
                written.push(p);
            }
        }
    }
    if !report.timings.is_empty() {
        let p = dir.join(format!("{stem}.timings.json"));
        write_file(&p, serde_json::to_string_pretty(&report.timings)?.as_bytes())?;
        written.push(p);
    }
    Ok(written)
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    Ok(serde_json::from_slice(&crate::container::read_file(path)?)?)
}
