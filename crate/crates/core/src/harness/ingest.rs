//! Schema-driven ingestion of dated return series from CSV.

use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::harness::features::DatedSeries;

/// Column map for a returns file.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub date_column: String,
    /// `chrono` format string for the date column.
    pub date_format: String,
    pub columns: Vec<String>,
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "NaN" | "nan" | "null" | ".")
}

/// Reads the named columns. Missing values are forward-filled; rows before a
/// series' first observation are dropped from that series.
pub fn load_returns_csv(path: &Path, schema: &CsvSchema) -> Result<Vec<DatedSeries>> {
    if schema.columns.is_empty() {
        return Err(Error::Config("the schema names no value columns".into()));
    }
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_owned(),
        line,
        message,
    };
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))
    };
    let date_idx = find(&schema.date_column)?;
    let value_idx: Vec<usize> = schema.columns.iter().map(|c| find(c)).collect::<Result<_>>()?;

    let mut out: Vec<DatedSeries> = schema
        .columns
        .iter()
        .map(|c| DatedSeries {
            name: c.clone(),
            dates: Vec::new(),
            values: Vec::new(),
        })
        .collect();
    let mut last: Vec<Option<f64>> = vec![None; value_idx.len()];
    let mut prev_date: Option<NaiveDate> = None;
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let raw_date = rec.get(date_idx).unwrap_or("").trim();
        let date = NaiveDate::parse_from_str(raw_date, &schema.date_format)
            .map_err(|e| parse_err(line, format!("bad date `{raw_date}`: {e}")))?;
        if let Some(p) = prev_date {
            if date <= p {
                return Err(parse_err(line, format!("date {date} does not follow {p}; dates must increase")));
            }
        }
        prev_date = Some(date);
        let date_str = date.format("%Y-%m-%d").to_string();
        for (k, &idx) in value_idx.iter().enumerate() {
            let field = rec.get(idx).unwrap_or("");
            if !is_missing(field) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(line, format!("column `{}`: cannot parse `{field}`", schema.columns[k])))?;
                if !v.is_finite() {
                    return Err(parse_err(line, format!("column `{}`: non-finite value", schema.columns[k])));
                }
                last[k] = Some(v);
            }
            if let Some(v) = last[k] {
                out[k].dates.push(date_str.clone());
                out[k].values.push(v);
            }
        }
    }
    if let Some(empty) = out.iter().find(|s| s.values.is_empty()) {
        return Err(Error::InvalidDataset(format!("column `{}` has no observations", empty.name)));
    }
    Ok(out)
}

/// Trims every series to the dates they all cover. Inputs must come from one
/// file, so after dropping leading gaps they differ only in their start.
pub fn align_common_start(series: &[DatedSeries]) -> Vec<DatedSeries> {
    let shortest = series.iter().map(|s| s.values.len()).min().unwrap_or(0);
    series
        .iter()
        .map(|s| {
            let skip = s.values.len() - shortest;
            DatedSeries {
                name: s.name.clone(),
                dates: s.dates[skip..].to_vec(),
                values: s.values[skip..].to_vec(),
            }
        })
        .collect()
}
