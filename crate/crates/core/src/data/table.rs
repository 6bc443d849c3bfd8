//! Comma-separated tabular ingestion with per-column min-max scaling.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Example};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSchema {
    pub label_column: String,
    /// Feature columns in the order they are read. Empty means every column
    /// except the label, in file order.
    #[serde(default)]
    pub feature_columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone)]
pub struct LoadedTable {
    pub dataset: Dataset,
    pub scaling: Vec<ColumnScale>,
    /// Original label value for each class index.
    pub label_names: Vec<String>,
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(std::io::Error::other(e.to_string())),
        _ => Error::Parse { line, message: e.to_string() },
    }
}

/// Reads a headed CSV file. Features are min-max scaled per column to
/// `[0,1]`; a constant column maps to 0.0. Labels are mapped to contiguous
/// indices in numeric order when every label is an unsigned integer and in
/// lexicographic order otherwise.
pub fn load_table(path: impl AsRef<Path>, schema: &TableSchema) -> Result<LoadedTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref()).map_err(csv_error)?;
    let headers: Vec<String> = reader.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in header {headers:?}")))
    };
    let label_idx = find(&schema.label_column)?;
    let feature_names: Vec<String> = if schema.feature_columns.is_empty() {
        headers.iter().enumerate().filter(|(i, _)| *i != label_idx).map(|(_, h)| h.clone()).collect()
    } else {
        schema.feature_columns.clone()
    };
    if feature_names.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }
    let feature_idx = feature_names.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;

    let mut raw: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let mut row = Vec::with_capacity(feature_idx.len());
        for (&ci, name) in feature_idx.iter().zip(&feature_names) {
            let cell = record.get(ci).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| {
                Error::Schema(format!("line {line}: column '{name}' value '{cell}' is not numeric"))
            })?;
            if !v.is_finite() {
                return Err(Error::Schema(format!("line {line}: column '{name}' value '{cell}' is not finite")));
            }
            row.push(v);
        }
        raw.push(row);
        raw_labels.push(record.get(label_idx).unwrap_or("").trim().to_string());
    }
    if raw.is_empty() {
        return Err(Error::Schema("table has no data rows".into()));
    }

    let distinct: BTreeSet<&str> = raw_labels.iter().map(String::as_str).collect();
    let mut label_names: Vec<String> = distinct.iter().map(|s| s.to_string()).collect();
    if label_names.iter().all(|s| s.parse::<u64>().is_ok()) {
        label_names.sort_by_key(|s| s.parse::<u64>().unwrap_or(0));
    }
    if label_names.len() < 2 {
        return Err(Error::Schema("label column needs at least two distinct values".into()));
    }

    let dim = feature_names.len();
    let mut scaling = Vec::with_capacity(dim);
    for (j, name) in feature_names.iter().enumerate() {
        let (min, max) = raw
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[j]), hi.max(r[j])));
        scaling.push(ColumnScale { name: name.clone(), min, max });
    }
    let examples = raw
        .into_iter()
        .zip(&raw_labels)
        .map(|(row, lab)| {
            let features = row
                .iter()
                .zip(&scaling)
                .map(|(&v, s)| if s.max > s.min { ((v - s.min) / (s.max - s.min)).clamp(0.0, 1.0) } else { 0.0 })
                .collect();
            let label = label_names.iter().position(|n| n == lab).unwrap_or(0);
            Example { features, label }
        })
        .collect();
    let dataset = Dataset::new(examples, label_names.len(), dim)?;
    Ok(LoadedTable { dataset, scaling, label_names })
}

/// Writes `data` as CSV with columns `f0..f{d-1},label`.
pub fn write_table(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_error)?;
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_error)?;
    for e in data.examples() {
        let mut rec: Vec<String> = e.features.iter().map(|v| format!("{v:?}")).collect();
        rec.push(e.label.to_string());
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
