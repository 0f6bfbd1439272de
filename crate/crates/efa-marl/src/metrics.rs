//! Per-episode metrics records and their JSON-lines files.
//!
//! `metrics.jsonl` holds one [`MetricsRecord`] per line with the fields in
//! declaration order. Everything in it is a function of the configuration,
//! so repeated runs produce identical files. Wall-clock time is kept apart in
//! `timing.csv` (`episode,wall_ms`).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Zero-based episode index.
    pub episode: u64,
    pub reward: f64,
    pub adversary_reward: Option<f64>,
    /// Total loss of this episode's update, if one ran.
    pub loss: Option<f64>,
    pub td_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub adversary_loss: Option<f64>,
    /// Penalty factor after the episode.
    pub alpha: f64,
    /// Exploration rate at the start of the episode.
    pub epsilon: f64,
    /// Steps each agent spent as first mover.
    pub elected_counts: Vec<u64>,
    pub optimizer_steps: u64,
}

/// Buffered JSON-lines writer.
pub struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value).map_err(|e| Error::Json {
            path: self.path.clone(),
            source: e,
        })?;
        self.out
            .write_all(b"\n")
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a metrics file; a malformed line fails with its line number.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Trailing mean over the last `window` values (fewer at the start).
pub fn rolling_mean(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            mean(&values[lo..=i])
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Mean of the last 100 values.
pub fn final_mean(rewards: &[f64]) -> f64 {
    mean(&rewards[rewards.len().saturating_sub(100)..])
}
