//! Table serialization.
//!
//! JSON carries the full table. CSV has one row per method and dataset with
//! the fixed column order of [`csv_header`]:
//!
//! ```text
//! method, dataset, status, seeds_ok,
//! <field>_mean, <field>_std   for field in pacc miou abr rmse delta1 delta2 delta3 valid_fraction delta_m
//! delta_m_pct                 mean ΔM with one decimal and explicit sign
//! ```
//!
//! Numeric cells use the shortest representation that parses back to the
//! same `f64`; absent values are empty cells.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::experiment::{ExperimentTable, MetricValues, TABLE_SCHEMA_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::config(format!("unknown report format {s:?}; expected csv or json"))),
        }
    }
}

/// ΔM in table style: one decimal, explicit sign.
pub fn format_delta_m(percent: f64) -> String {
    // avoid "-0.0" for exact zeros
    let v = if percent == 0.0 { 0.0 } else { percent };
    format!("{v:+.1}")
}

pub fn to_json(table: &ExperimentTable) -> Result<String> {
    let mut s = serde_json::to_string_pretty(table)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json(text: &str) -> Result<ExperimentTable> {
    let table: ExperimentTable = serde_json::from_str(text)?;
    if table.schema_version != TABLE_SCHEMA_VERSION {
        return Err(Error::config(format!("unsupported table schema_version {}", table.schema_version)));
    }
    Ok(table)
}

pub fn csv_header() -> Vec<String> {
    let mut h: Vec<String> = ["method", "dataset", "status", "seeds_ok"].iter().map(|s| s.to_string()).collect();
    for f in MetricValues::FIELDS {
        h.push(format!("{f}_mean"));
        h.push(format!("{f}_std"));
    }
    h.push("delta_m_pct".into());
    h
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn to_csv(table: &ExperimentTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(csv_header()).map_err(csv_error)?;
    for row in &table.rows {
        let mut rec = vec![
            row.method.clone(),
            row.dataset.clone(),
            row.status.name().to_string(),
            row.runs.iter().filter(|r| r.metrics.is_some()).count().to_string(),
        ];
        let mean = row.mean.map(|m| m.values()).unwrap_or([None; 9]);
        let std = row.std.map(|m| m.values()).unwrap_or([None; 9]);
        for (m, s) in mean.iter().zip(&std) {
            rec.push(cell(*m));
            rec.push(cell(*s));
        }
        rec.push(mean[8].map(format_delta_m).unwrap_or_default());
        w.write_record(&rec).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::config(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::config(format!("csv: {e}")))
}

fn csv_error(e: csv::Error) -> Error {
    Error::config(format!("csv: {e}"))
}

pub fn render(table: &ExperimentTable, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => to_json(table),
        ReportFormat::Csv => to_csv(table),
    }
}

/// Writes the table to `path` in the given format.
pub fn emit_report(table: &ExperimentTable, format: ReportFormat, path: &Path) -> Result<()> {
    fs::write(path, render(table, format)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_m_formatting() {
        assert_eq!(format_delta_m(9.453), "+9.5");
        assert_eq!(format_delta_m(11.545_001), "+11.5");
        assert_eq!(format_delta_m(-3.25), "-3.2");
        assert_eq!(format_delta_m(0.0), "+0.0");
        assert_eq!(format_delta_m(-0.0), "+0.0");
    }

    #[test]
    fn formats_parse() {
        assert_eq!("csv".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
        assert_eq!("json".parse::<ReportFormat>().unwrap(), ReportFormat::Json);
        assert!("xml".parse::<ReportFormat>().is_err());
    }

    #[test]
    fn header_is_fixed() {
        let h = csv_header();
        assert_eq!(h.len(), 4 + 2 * 9 + 1);
        assert_eq!(&h[..6], ["method", "dataset", "status", "seeds_ok", "pacc_mean", "pacc_std"]);
        assert_eq!(h.last().unwrap(), "delta_m_pct");
    }
}
