//! Learning-curve export for external plotting.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{read_metrics, rolling_mean};

pub const DEFAULT_WINDOW: usize = 100;

/// `(episode, trailing mean reward over window)` for every record of a metrics file.
pub fn export_plot_data(metrics: &Path, window: usize) -> Result<Vec<(u64, f64)>> {
    if window == 0 {
        return Err(Error::invalid("window", "must be at least 1"));
    }
    let records = read_metrics(metrics)?;
    let rewards: Vec<f64> = records.iter().map(|r| r.reward).collect();
    let smooth = rolling_mean(&rewards, window);
    Ok(records.iter().map(|r| r.episode).zip(smooth).collect())
}

pub fn plot_csv(rows: &[(u64, f64)]) -> String {
    let mut s = String::from("episode,mean_reward\n");
    for (e, r) in rows {
        let _ = writeln!(s, "{e},{r}");
    }
    s
}
