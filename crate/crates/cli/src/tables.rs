//! Output files and their loaders. Tables are comma-separated with a fixed
//! header; missing values are empty fields. Numbers are written in the
//! shortest form that parses back to the same `f64`, so reading a table and
//! writing it again reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use polymfvi::optim::OptTrace;
use polymfvi::ConeParams;

use crate::CliError;

pub const TRACE_HEADER: [&str; 5] = ["iter", "value", "grad_norm", "w2sq_to_ref", "wall_ms"];

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self { header: header.iter().map(|s| s.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Option<f64>>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
        w.write_record(&self.header).map_err(|e| io_err(path, e))?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()))
                .map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
        let header: Vec<String> = r.headers().map_err(|e| io_err(path, e))?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| io_err(path, e))?;
            let row = rec
                .iter()
                .map(|f| {
                    if f.is_empty() {
                        Ok(None)
                    } else {
                        f.parse::<f64>().map(Some).map_err(|_| {
                            CliError::Io(format!("{}: row {}: `{f}` is not a number", path.display(), line + 1))
                        })
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Ok(Self { header, rows })
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn trace_table(trace: &OptTrace) -> Table {
    let mut t = Table::new(&TRACE_HEADER);
    for r in &trace.records {
        t.push(vec![Some(r.iter as f64), r.value, r.grad_norm, r.w2sq_to_ref, r.wall_ms]);
    }
    t
}

/// Header `x1,...,xd`, one row per sample.
pub fn samples_table(samples: &DMatrix<f64>) -> Table {
    let header: Vec<String> = (1..=samples.ncols()).map(|i| format!("x{i}")).collect();
    let mut t = Table::new(&header);
    for row in samples.row_iter() {
        t.push(row.iter().map(|x| Some(*x)).collect());
    }
    t
}

pub fn samples_from_table(t: &Table) -> Result<DMatrix<f64>, CliError> {
    let d = t.header.len();
    let mut out = DMatrix::zeros(t.rows.len(), d);
    for (r, row) in t.rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            out[(r, c)] = v.ok_or_else(|| CliError::Io(format!("sample row {} has an empty field", r + 1)))?;
        }
    }
    Ok(out)
}

/// `T(x) = αx + λ·ψ(x) + v` for every coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub alpha: f64,
    pub v: Vec<f64>,
    /// One row per coordinate, one column per dictionary element.
    pub lambda: Vec<Vec<f64>>,
}

impl ParamsFile {
    pub fn from_params(p: &ConeParams) -> Self {
        Self {
            alpha: p.alpha,
            v: p.v.iter().copied().collect(),
            lambda: p.lambda.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    pub fn to_params(&self) -> Result<ConeParams, CliError> {
        let d = self.v.len();
        let j = self.lambda.first().map_or(0, Vec::len);
        if self.lambda.len() != d || self.lambda.iter().any(|r| r.len() != j) {
            return Err(CliError::Io("lambda must have one row of equal length per coordinate".into()));
        }
        let lambda = DMatrix::from_fn(d, j, |i, k| self.lambda[i][k]);
        ConeParams::new(self.alpha, lambda, DVector::from_vec(self.v.clone())).map_err(CliError::Run)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureFile {
    pub weights: Vec<f64>,
    pub particles: Vec<ParamsFile>,
}

pub fn write_toml<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = toml::to_string(value).map_err(|e| io_err(path, e))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    toml::from_str(&text).map_err(|e| io_err(path, e))
}
