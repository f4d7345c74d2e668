//! Simulation-output diagnostics: batch-means variance estimation and
//! within-group convergence tracking.

use serde::{Deserialize, Serialize};

use crate::error::{BdrlError, Result};

/// Batch-means estimate of the mean and its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMeansReport {
    pub grand_mean: f64,
    pub standard_error: f64,
    pub batch_count: usize,
    pub batch_size: usize,
    pub batch_means: Vec<f64>,
    /// Trailing samples dropped because the batch count did not divide N.
    pub dropped_samples: usize,
}

/// Partitions `samples` into `batch_count` adjacent batches of size
/// `N / batch_count` (the remainder is dropped and counted) and estimates
/// the standard error of the grand mean from the batch-mean variance.
pub fn batch_means(samples: &[f64], batch_count: usize) -> Result<BatchMeansReport> {
    let n = samples.len();
    if batch_count == 0 || batch_count > n {
        return Err(BdrlError::invalid_config(
            "batch_count",
            format!("must lie in 1..={n}, got {batch_count}"),
        ));
    }
    let batch_size = n / batch_count;
    let retained = batch_size * batch_count;
    let dropped = n - retained;
    if dropped > 0 {
        log::warn!("batch_means dropped {dropped} trailing samples (N={n}, B={batch_count})");
    }
    let batch_means_vec: Vec<f64> = (0..batch_count)
        .map(|q| {
            let start = q * batch_size;
            samples[start..start + batch_size].iter().sum::<f64>() / batch_size as f64
        })
        .collect();
    let grand_mean = batch_means_vec.iter().sum::<f64>() / batch_count as f64;
    let standard_error = if batch_count > 1 {
        let ss: f64 = batch_means_vec
            .iter()
            .map(|m| (m - grand_mean) * (m - grand_mean))
            .sum();
        (ss / (batch_count as f64 * (batch_count - 1) as f64)).sqrt()
    } else {
        0.0
    };
    Ok(BatchMeansReport {
        grand_mean,
        standard_error,
        batch_count,
        batch_size,
        batch_means: batch_means_vec,
        dropped_samples: dropped,
    })
}

/// Standard-error estimates across a range of batch counts, for the
/// stability plot that picks the operating B.
pub fn batch_sensitivity(samples: &[f64], b_range: &[usize]) -> Result<Vec<(usize, f64)>> {
    b_range
        .iter()
        .map(|&b| batch_means(samples, b).map(|r| (b, r.standard_error)))
        .collect()
}

/// One recorded point of a group's worst-pair discrepancy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub epoch: usize,
    pub group: usize,
    pub max_pair_w2: f64,
}

/// Per-group convergence series with strictly increasing epochs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    entries: Vec<TraceEntry>,
}

impl ConvergenceTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: TraceEntry) -> Result<()> {
        if let Some(last) = self
            .entries
            .iter()
            .rev()
            .find(|e| e.group == entry.group)
        {
            if entry.epoch <= last.epoch {
                return Err(BdrlError::Invariant(format!(
                    "trace epochs must increase per group: {} after {} in group {}",
                    entry.epoch, last.epoch, entry.group
                )));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn group_series(&self, group: usize) -> Vec<TraceEntry> {
        self.entries
            .iter()
            .copied()
            .filter(|e| e.group == group)
            .collect()
    }

    pub fn extend(&mut self, other: ConvergenceTrace) -> Result<()> {
        for e in other.entries {
            self.push(e)?;
        }
        Ok(())
    }
}
