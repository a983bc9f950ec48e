//! Plot-ready tidy CSVs derived from a finished run directory. Nothing is
//! rendered here; each file is one figure family.

use std::fs;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::io::{read_jsonl, read_samples, write_table};
use crate::error::Result;
use crate::finetune::TrainLogRecord;

pub const HISTOGRAM_BINS: usize = 50;

/// Writes `plots/curves.csv`, `plots/histogram.csv` and
/// `plots/value_slices.csv` for whatever inputs exist in `run_dir`.
/// Returns the files written; a directory with no inputs yields none.
pub fn emit_plotdata(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let plots = run_dir.join("plots");
    let mut written = vec![];
    let train_log = run_dir.join("train_log.jsonl");
    let samples = run_dir.join("samples.csv");
    let slices = run_dir.join("value_slices.csv");
    if !train_log.exists() && !samples.exists() && !slices.exists() {
        log::warn!("{}: nothing to plot", run_dir.display());
        return Ok(written);
    }
    fs::create_dir_all(&plots)?;

    if train_log.exists() {
        let log: Vec<TrainLogRecord> = read_jsonl(&train_log)?;
        let rows: Vec<Vec<String>> = log
            .iter()
            .map(|r| {
                vec![
                    r.iteration.to_string(),
                    format!("{:e}", r.mean_reward),
                    format!("{:e}", r.kl_penalty),
                    format!("{:e}", r.loss),
                    format!("{:e}", r.grad_norm),
                ]
            })
            .collect();
        let p = plots.join("curves.csv");
        write_table(&p, &["iteration", "mean_reward", "kl_penalty", "loss", "grad_norm"], &rows)?;
        written.push(p);
    }

    if samples.exists() {
        let x = read_samples(&samples)?;
        let col: Vec<f64> = (0..x.rows()).map(|r| x.row(r)[0]).collect();
        let target = RunConfig::load(&run_dir.join("config.toml"))
            .ok()
            .and_then(|c| c.analytic_target().ok().flatten())
            .filter(|t| t.dim() == 1);
        let (mut lo, mut hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !(hi > lo) {
            lo -= 0.5;
            hi += 0.5;
        }
        let width = (hi - lo) / HISTOGRAM_BINS as f64;
        let mut counts = vec![0usize; HISTOGRAM_BINS];
        for v in &col {
            let b = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
            counts[b] += 1;
        }
        let n = col.len().max(1) as f64;
        let rows: Vec<Vec<String>> = counts
            .iter()
            .enumerate()
            .map(|(b, &c)| {
                let a = lo + b as f64 * width;
                let center = a + 0.5 * width;
                let tgt = target
                    .as_ref()
                    .and_then(|t| t.log_density(&[center]).ok())
                    .map_or(String::new(), |l| format!("{:e}", l.exp()));
                vec![
                    format!("{a:e}"),
                    format!("{:e}", a + width),
                    format!("{center:e}"),
                    format!("{:e}", c as f64 / (n * width)),
                    tgt,
                ]
            })
            .collect();
        let p = plots.join("histogram.csv");
        write_table(&p, &["bin_lo", "bin_hi", "center", "density", "target_density"], &rows)?;
        written.push(p);
    }

    if slices.exists() {
        let p = plots.join("value_slices.csv");
        fs::copy(&slices, &p)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::io::write_samples;
    use crate::rng::Stream;
    use crate::tensor::DenseArray;

    #[test]
    fn histogram_integrates_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Stream::new(3, 0);
        let x = DenseArray::matrix(500, 1, (0..500).map(|_| rng.normal()).collect()).unwrap();
        write_samples(&dir.path().join("samples.csv"), "r", &x).unwrap();
        let out = emit_plotdata(dir.path()).unwrap();
        assert_eq!(out.len(), 1);
        let mut rdr = csv::Reader::from_path(&out[0]).unwrap();
        let mut total = 0.0;
        for rec in rdr.records() {
            let rec = rec.unwrap();
            let lo: f64 = rec[0].parse().unwrap();
            let hi: f64 = rec[1].parse().unwrap();
            let d: f64 = rec[3].parse().unwrap();
            total += d * (hi - lo);
        }
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_directory_yields_nothing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plotdata(dir.path()).unwrap().is_empty());
        assert!(!dir.path().join("plots").exists());
    }
}
