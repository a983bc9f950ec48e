use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::metrics::MetricRecord;
use crate::diffusion::TrajectoryBatch;
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Collects metric records for one run and writes them as JSON lines.
#[derive(Clone, Debug)]
pub struct MetricLog {
    run_id: String,
    records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn new(run_id: &str) -> Self {
        MetricLog {
            run_id: run_id.to_string(),
            records: vec![],
        }
    }

    pub fn record(&mut self, metric: impl Into<String>, value: f64, samples: usize) {
        self.records.push(MetricRecord {
            run_id: self.run_id.clone(),
            metric: metric.into(),
            value: value.is_finite().then_some(value),
            samples,
            timestamp: now_ms(),
        });
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.records.iter().rev().find(|r| r.metric == metric).and_then(|r| r.value)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.records)
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Parse(format!("json: {e}")))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn append_jsonl<T: Serialize>(w: &mut impl Write, row: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, row).map_err(|e| Error::Parse(format!("json: {e}")))?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Strict JSON-lines reader: every non-empty line must parse.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = vec![];
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Terminal samples: `run_id,sample_id,x0,x1,...`.
pub fn write_samples(path: &Path, run_id: &str, x: &DenseArray) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["run_id".to_string(), "sample_id".to_string()];
    header.extend((0..x.cols()).map(|c| format!("x{c}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in 0..x.rows() {
        let mut row = vec![run_id.to_string(), r.to_string()];
        row.extend(x.row(r).iter().map(|v| format!("{v:e}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<DenseArray> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with('x'))
        .map(|(i, _)| i)
        .collect();
    if cols.is_empty() {
        return Err(Error::Parse(format!("{}: no x columns", path.display())));
    }
    let mut values = vec![];
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        for &c in &cols {
            let v: f64 = rec
                .get(c)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::Parse(format!("{}: bad number in row {}", path.display(), rows + 1)))?;
            values.push(v);
        }
        rows += 1;
    }
    DenseArray::matrix(rows, cols.len(), values)
}

/// First `limit` trajectories: `run_id,traj_id,t,x...,log_density`, where
/// the log-density is that of the transition that produced `x_t`.
pub fn write_trajectories(path: &Path, run_id: &str, batch: &TrajectoryBatch, limit: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let d = batch.dim();
    let mut header = vec!["run_id".to_string(), "traj_id".to_string(), "t".to_string()];
    header.extend((0..d).map(|c| format!("x{c}")));
    header.push("log_density".into());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..limit.min(batch.len()) {
        for t in (0..=batch.top).rev() {
            let mut row = vec![run_id.to_string(), i.to_string(), t.to_string()];
            row.extend(batch.states[t].row(i).iter().map(|v| format!("{v:e}")));
            row.push(match batch.step(t + 1) {
                Some(s) if s.log_density[i].is_finite() => format!("{:e}", s.log_density[i]),
                _ => String::new(),
            });
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Generic tidy CSV writer.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
