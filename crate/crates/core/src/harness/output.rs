//! CSV and JSON-lines outputs.
//!
//! Per repetition: `history.csv` (`rep,iter,evals,hv,wallclock_s`),
//! `events.jsonl` (one object per batch), `archive.csv` (nondominated
//! observations, `x0.. y0..`) and `observations.csv` (every successful
//! observation, same columns). Experiment level: the merged `history.csv` and
//! `events.jsonl` plus `summary.csv` (`iter,evals,hv_mean,hv_std,n_reps`).

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::acquisition::{BoState, IterationRecord};
use crate::error::{Error, Result};

pub const HISTORY_HEADER: [&str; 5] = ["rep", "iter", "evals", "hv", "wallclock_s"];
pub const SUMMARY_HEADER: [&str; 5] = ["iter", "evals", "hv_mean", "hv_std", "n_reps"];

#[derive(Serialize)]
struct HistoryRow {
    rep: usize,
    iter: usize,
    evals: usize,
    hv: f64,
    wallclock_s: f64,
}

#[derive(Serialize)]
struct Event<'a> {
    rep: usize,
    #[serde(flatten)]
    record: &'a IterationRecord,
}

/// Files of one repetition inside its own directory.
#[derive(Debug, Clone)]
pub struct RepFiles {
    pub dir: PathBuf,
    pub rep: usize,
}

impl RepFiles {
    pub fn new(dir: impl Into<PathBuf>, rep: usize) -> Self {
        Self { dir: dir.into(), rep }
    }

    pub fn state(&self) -> PathBuf {
        self.dir.join("state.json")
    }

    pub fn history(&self) -> PathBuf {
        self.dir.join("history.csv")
    }

    pub fn events(&self) -> PathBuf {
        self.dir.join("events.jsonl")
    }

    pub fn archive(&self) -> PathBuf {
        self.dir.join("archive.csv")
    }

    pub fn observations(&self) -> PathBuf {
        self.dir.join("observations.csv")
    }

    /// Rewrites the incremental files from the records already in `state`.
    pub fn reset(&self, state: &BoState) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let mut w = csv::Writer::from_path(self.history())?;
        w.write_record(HISTORY_HEADER)?;
        w.flush()?;
        File::create(self.events())?;
        for r in &state.history.records {
            self.append(r)?;
        }
        Ok(())
    }

    /// Appends one record to the history and the event log.
    pub fn append(&self, record: &IterationRecord) -> Result<()> {
        let file = OpenOptions::new().append(true).open(self.history())?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        w.serialize(history_row(self.rep, record))?;
        w.flush()?;
        let mut ev = OpenOptions::new().append(true).open(self.events())?;
        let line = serde_json::to_string(&Event {
            rep: self.rep,
            record,
        })?;
        writeln!(ev, "{line}")?;
        Ok(())
    }

    /// Writes the archive and observation tables.
    pub fn finish(&self, state: &BoState) -> Result<()> {
        let d = state.config.space.dim();
        let k = state.config.k;
        let archive = state.archive();
        write_points(&self.archive(), d, k, &archive.x, &archive.y)?;
        write_points(&self.observations(), d, k, &state.data.x, &state.data.y)
    }
}

fn history_row(rep: usize, r: &IterationRecord) -> HistoryRow {
    HistoryRow {
        rep,
        iter: r.iteration,
        evals: r.evaluations,
        hv: r.hv,
        wallclock_s: r.wallclock_s,
    }
}

/// Column names `x0..x{d-1}, y0..y{k-1}`.
pub fn point_header(d: usize, k: usize) -> Vec<String> {
    (0..d).map(|i| format!("x{i}")).chain((0..k).map(|i| format!("y{i}"))).collect()
}

pub fn write_points(path: &Path, d: usize, k: usize, x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(point_header(d, k))?;
    for (xi, yi) in x.iter().zip(y) {
        w.serialize(xi.iter().chain(yi).collect::<Vec<_>>())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the `y*` columns of an archive CSV.
pub fn read_objectives(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let cols: Vec<usize> = r
        .headers()?
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with('y') && h[1..].parse::<usize>().is_ok())
        .map(|(i, _)| i)
        .collect();
    if cols.is_empty() {
        return Err(Error::invalid(format!("{}: no y columns", path.display())));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = cols
            .iter()
            .map(|&c| {
                rec.get(c)
                    .unwrap_or("")
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Writes the experiment-level files from completed repetitions, in
/// repetition order.
pub fn write_merged(dir: &Path, reps: &[(usize, &BoState)]) -> Result<()> {
    let mut hist = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(dir.join("history.csv"))?;
    hist.write_record(HISTORY_HEADER)?;
    let mut events = BufWriter::new(File::create(dir.join("events.jsonl"))?);
    for &(rep, state) in reps {
        for r in &state.history.records {
            hist.serialize(history_row(rep, r))?;
            writeln!(events, "{}", serde_json::to_string(&Event { rep, record: r })?)?;
        }
    }
    hist.flush()?;
    events.flush()?;

    let mut sum = csv::Writer::from_path(dir.join("summary.csv"))?;
    sum.write_record(SUMMARY_HEADER)?;
    let len = reps.iter().map(|(_, s)| s.history.records.len()).min().unwrap_or(0);
    for i in 0..len {
        let first = &reps[0].1.history.records[i];
        let hv: Vec<f64> = reps.iter().map(|(_, s)| s.history.records[i].hv).collect();
        let (mean, std) = mean_std(&hv);
        sum.write_record([
            first.iteration.to_string(),
            first.evaluations.to_string(),
            mean.to_string(),
            std.to_string(),
            hv.len().to_string(),
        ])?;
    }
    sum.flush()?;
    Ok(())
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_population() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }

    #[test]
    fn points_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_points(&p, 2, 2, &[vec![0.1, 0.2], vec![0.3, 0.4]], &[vec![1.5, -2.0], vec![0.1, 1e-17]]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("x0,x1,y0,y1\n"));
        assert_eq!(read_objectives(&p).unwrap(), vec![vec![1.5, -2.0], vec![0.1, 1e-17]]);
    }
}
