//! Metrics CSV: header `step,L_R,L_S,lr,fg_mass,ms_per_step`, one row per
//! step. Numbers use Rust's shortest round-trip formatting, so the decimal
//! point is always `.` and parsing a row back gives the same `f64`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::MetricRow;

pub const HEADER: &str = "step,L_R,L_S,lr,fg_mass,ms_per_step";

pub fn format_row(r: &MetricRow) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.step, r.loss_r, r.loss_s, r.lr, r.fg_mass, r.ms_per_step
    )
}

/// Streams rows to disk as training runs.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{HEADER}")?;
        Ok(Self { out })
    }

    pub fn push(&mut self, r: &MetricRow) -> Result<()> {
        writeln!(self.out, "{}", format_row(r))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    for r in rows {
        w.push(r)?;
    }
    w.finish()
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Format(format!("metrics: expected header `{HEADER}`")));
    }
    lines
        .map(|line| {
            let bad = || Error::Format(format!("metrics: bad row `{line}`"));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(bad());
            }
            let f = |i: usize| cols[i].parse::<f64>().map_err(|_| bad());
            Ok(MetricRow {
                step: cols[0].parse().map_err(|_| bad())?,
                loss_r: f(1)?,
                loss_s: f(2)?,
                lr: f(3)?,
                fg_mass: f(4)?,
                ms_per_step: f(5)?,
            })
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    parse_metrics(&std::fs::read_to_string(path)?)
}
