use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Shortest decimal that parses back to the same `f64`; scientific notation
/// outside `[1e-4, 1e15)`.
pub fn format_float(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn parse_float(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Format(format!("not a number: `{s}`")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResultsFormat {
    Csv,
    KeyValue,
}

impl FromStr for ResultsFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "keyvalue" | "kv" => Ok(Self::KeyValue),
            other => Err(Error::invalid(format!("unknown results format `{other}`"))),
        }
    }
}

/// A numeric table plus free-form metadata.
///
/// The CSV form holds only the table. The key-value form holds the metadata,
/// a `columns` line and one `row.<i>` line per row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub metadata: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Report {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            metadata: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn meta(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.metadata.push((key.to_string(), value.to_string()));
        self
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Dimension {
                expected: self.columns.len(),
                found: row.len(),
                context: "report row".into(),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get_meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format_float(*v)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_keyvalue(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "columns = {}", self.columns.join(","));
        for (i, row) in self.rows.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format_float(*v)).collect();
            let _ = writeln!(out, "row.{i} = {}", cells.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("CSV without header".into()))?;
        let columns: Vec<String> = header.split(',').map(str::to_string).collect();
        let mut report = Report {
            metadata: Vec::new(),
            columns,
            rows: Vec::new(),
        };
        for line in lines.filter(|l| !l.is_empty()) {
            let row = line.split(',').map(parse_float).collect::<Result<Vec<_>>>()?;
            report.push_row(row)?;
        }
        Ok(report)
    }

    pub fn from_keyvalue(text: &str) -> Result<Self> {
        let mut report = Report::default();
        for (k, v) in parse_keyvalue(text)? {
            if k == "columns" {
                report.columns = v.split(',').map(str::to_string).collect();
            } else if let Some(idx) = k.strip_prefix("row.") {
                let i: usize = idx
                    .parse()
                    .map_err(|_| Error::Format(format!("bad row key `{k}`")))?;
                if i != report.rows.len() {
                    return Err(Error::Format(format!("row {i} out of order")));
                }
                let row = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(parse_float).collect::<Result<Vec<_>>>()?
                };
                report.push_row(row)?;
            } else {
                report.metadata.push((k, v));
            }
        }
        Ok(report)
    }

    pub fn render(&self, format: ResultsFormat) -> String {
        match format {
            ResultsFormat::Csv => self.to_csv(),
            ResultsFormat::KeyValue => self.to_keyvalue(),
        }
    }
}

pub fn write_results(report: &Report, path: &Path, format: ResultsFormat) -> Result<()> {
    fs::write(path, report.render(format))?;
    Ok(())
}

pub fn read_results(path: &Path, format: ResultsFormat) -> Result<Report> {
    let text = fs::read_to_string(path)?;
    match format {
        ResultsFormat::Csv => Report::from_csv(&text),
        ResultsFormat::KeyValue => Report::from_keyvalue(&text),
    }
}

/// `key = value` lines in order; blank lines and `#` comments are skipped.
pub fn parse_keyvalue(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected `key = value`", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Format(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}
