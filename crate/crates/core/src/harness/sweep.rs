//! Grid sweeps over attention hyperparameters.
//!
//! Every cell trains from the base configuration with the same seed, so cells
//! differ only in the swept values and their results do not depend on the
//! order (or thread) they run in.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{csv_err, train_run, ExperimentConfig};
use crate::attention::Variant;
use crate::error::Result;

/// Values to sweep. An empty axis keeps the base configuration's value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub temperature: Vec<f64>,
    pub n_iters: Vec<usize>,
    pub block_size: Vec<usize>,
    pub variant: Vec<Variant>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub cell: usize,
    pub temperature: f64,
    pub n_iters: usize,
    pub block_size: usize,
    pub variant: Variant,
}

impl SweepCell {
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        let a = &mut cfg.model.attention;
        a.sinkhorn.temperature = self.temperature;
        a.sinkhorn.n_iters = self.n_iters;
        a.block_size = self.block_size;
        a.variant = self.variant;
        cfg
    }
}

/// One CSV row. `final_metric` is the final held-out loss; it is empty when the cell failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: usize,
    pub temperature: f64,
    pub n_iters: usize,
    pub block_size: usize,
    pub variant: Variant,
    pub final_metric: Option<f64>,
    pub wall_seconds: f64,
    pub status: String,
}

fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Cartesian product of the grid in row-major order (variant varies fastest).
pub fn cells(base: &ExperimentConfig, grid: &SweepGrid) -> Vec<SweepCell> {
    let a = &base.model.attention;
    let mut out = Vec::new();
    for &temperature in &axis(&grid.temperature, a.sinkhorn.temperature) {
        for &n_iters in &axis(&grid.n_iters, a.sinkhorn.n_iters) {
            for &block_size in &axis(&grid.block_size, a.block_size) {
                for &variant in &axis(&grid.variant, a.variant) {
                    out.push(SweepCell {
                        cell: out.len(),
                        temperature,
                        n_iters,
                        block_size,
                        variant,
                    });
                }
            }
        }
    }
    out
}

/// Trains one cell. Failures are recorded in the result rather than returned.
pub fn run_cell(base: &ExperimentConfig, cell: &SweepCell) -> CellResult {
    let start = Instant::now();
    let (final_metric, status) = match train_run(&cell.apply(base)) {
        Ok(run) => (Some(run.metrics.final_eval.loss), "ok".to_string()),
        Err(e) => (None, format!("error: {e}")),
    };
    CellResult {
        cell: cell.cell,
        temperature: cell.temperature,
        n_iters: cell.n_iters,
        block_size: cell.block_size,
        variant: cell.variant,
        final_metric,
        wall_seconds: start.elapsed().as_secs_f64(),
        status,
    }
}

/// Runs every cell on up to `workers` threads. Results come back in cell order.
pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid, workers: usize) -> Vec<CellResult> {
    let cells = cells(base, grid);
    let workers = workers.clamp(1, cells.len().max(1));
    let mut results: Vec<CellResult> = if workers == 1 {
        cells.iter().map(|c| run_cell(base, c)).collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let done = std::sync::Mutex::new(Vec::with_capacity(cells.len()));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    let Some(c) = cells.get(i) else { break };
                    let r = run_cell(base, c);
                    done.lock().expect("no worker panics while holding the lock").push(r);
                });
            }
        });
        done.into_inner().expect("workers finished")
    };
    results.sort_by_key(|r| r.cell);
    results
}

/// Writes the sweep table: cell parameters, final_metric, wall_seconds, status.
pub fn write_sweep_csv(results: &[CellResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in results {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
