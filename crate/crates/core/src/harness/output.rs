use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::experiment::{run_experiment, ExperimentReport};
use crate::data::TriggerSpec;
use crate::error::{Error, Result};

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per evaluated benign client plus a `mean` summary row.
pub fn metrics_csv(report: &ExperimentReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config_hash", "strategy", "attack", "defense", "client_id", "acc", "asr"]).map_err(csv_err)?;
    let head = [report.config_hash.as_str(), &report.strategy, &report.attack, &report.defense];
    for c in &report.clients {
        let mut row: Vec<String> = head.iter().map(|s| s.to_string()).collect();
        row.extend([c.client_id.to_string(), c.acc.to_string(), opt(c.asr)]);
        w.write_record(&row).map_err(csv_err)?;
    }
    let mut row: Vec<String> = head.iter().map(|s| s.to_string()).collect();
    row.extend(["mean".to_string(), report.mean_acc.to_string(), opt(report.mean_asr)]);
    w.write_record(&row).map_err(csv_err)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Masked trigger coordinates as `Feature ID: Value` lines.
pub fn trigger_text(trigger: &TriggerSpec) -> String {
    let mut s = format!("# target class {}\nFeature ID: Value\n", trigger.target());
    for (i, v) in trigger.masked_values() {
        s.push_str(&format!("{i}: {v}\n"));
    }
    s
}

/// Writes `report.json`, `metrics.csv` and `trigger.txt` into `dir`.
pub fn write_outputs(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    fs::write(dir.join("report.json"), json)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(report)?)?;
    fs::write(dir.join("trigger.txt"), trigger_text(&report.trigger))?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<ExperimentReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { line: e.line() as u64, message: e.to_string() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run: usize,
    pub overrides: Vec<String>,
    pub config_hash: String,
    pub mean_acc: f64,
    pub mean_asr: Option<f64>,
    pub mean_global_asr: Option<f64>,
}

/// Expands a `[grid]` table of `dotted.key = [values]` into the cartesian
/// product of override lists, keys in sorted order.
pub fn expand_grid(grid_text: &str) -> Result<Vec<Vec<String>>> {
    let doc: toml::Table = grid_text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let grid = doc
        .get("grid")
        .and_then(|g| g.as_table())
        .ok_or_else(|| Error::Config("grid file needs a [grid] table".into()))?;
    let mut combos: Vec<Vec<String>> = vec![vec![]];
    for (key, values) in grid {
        let values = values
            .as_array()
            .ok_or_else(|| Error::Config(format!("grid entry '{key}' must be an array")))?;
        if values.is_empty() {
            return Err(Error::Config(format!("grid entry '{key}' is empty")));
        }
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut next = c.clone();
                    next.push(format!("{key}={v}"));
                    next
                })
            })
            .collect();
    }
    Ok(combos)
}

/// Runs every grid point in parallel, writing each run's outputs into
/// `out_dir/run-NNN` and a `sweep.csv` summary.
pub fn run_sweep(config_text: &str, grid_text: &str, base_dir: Option<&Path>, out_dir: &Path) -> Result<Vec<SweepRow>> {
    let combos = expand_grid(grid_text)?;
    fs::create_dir_all(out_dir)?;
    let configs = combos
        .iter()
        .map(|ov| ExperimentConfig::from_toml_with_overrides(config_text, ov))
        .collect::<Result<Vec<_>>>()?;
    for c in &configs {
        c.validate()?;
    }
    let rows = configs
        .par_iter()
        .zip(combos.par_iter())
        .enumerate()
        .map(|(i, (cfg, ov))| -> Result<SweepRow> {
            let report = run_experiment(cfg, base_dir)?;
            write_outputs(&report, &out_dir.join(format!("run-{i:03}")))?;
            Ok(SweepRow {
                run: i,
                overrides: ov.clone(),
                config_hash: report.config_hash,
                mean_acc: report.mean_acc,
                mean_asr: report.mean_asr,
                mean_global_asr: report.mean_global_asr,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(out_dir.join("sweep.csv")).map_err(csv_err)?;
    w.write_record(["run", "overrides", "config_hash", "mean_acc", "mean_asr", "mean_global_asr"]).map_err(csv_err)?;
    for r in &rows {
        w.write_record([
            r.run.to_string(),
            r.overrides.join(";"),
            r.config_hash.clone(),
            r.mean_acc.to_string(),
            opt(r.mean_asr),
            opt(r.mean_global_asr),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(rows)
}
