//! Ablation grids: one seeded train+evaluate per cell.

use std::path::Path;

use serde::Serialize;

use crate::error::{CoreError, Result};

use super::{run_training, Method, TrainConfig};

/// Incremental threshold-ratio sequence for the task-count ablation: the
/// n-task setting uses the first n entries.
pub const TASK_RATIO_SEQUENCE: [f64; 5] = [0.0, 0.5, 0.7, 0.8, 0.9];

/// One swept hyperparameter axis.
#[derive(Debug, Clone, PartialEq)]
pub enum AblationGrid {
    /// Confidence threshold t_p values.
    ConfidenceThreshold(Vec<f64>),
    /// Number of surrogate tasks, following [`TASK_RATIO_SEQUENCE`].
    TaskCount(Vec<usize>),
    /// Number of labeled images made visible to training.
    LabeledSize(Vec<usize>),
}

impl AblationGrid {
    fn cells(&self) -> usize {
        match self {
            AblationGrid::ConfidenceThreshold(v) => v.len(),
            AblationGrid::TaskCount(v) => v.len(),
            AblationGrid::LabeledSize(v) => v.len(),
        }
    }

    /// Cell label and the derived config.
    fn instantiate(&self, idx: usize, base: &TrainConfig) -> Result<(String, TrainConfig)> {
        let mut cfg = base.clone();
        match self {
            AblationGrid::ConfidenceThreshold(values) => {
                cfg.t_p = values[idx];
                Ok((format!("tp={}", values[idx]), cfg))
            }
            AblationGrid::TaskCount(counts) => {
                let n = counts[idx];
                if n == 0 || n > TASK_RATIO_SEQUENCE.len() {
                    return Err(CoreError::invalid(format!(
                        "task count {} outside 1..={}",
                        n,
                        TASK_RATIO_SEQUENCE.len()
                    )));
                }
                cfg.ratios = TASK_RATIO_SEQUENCE[..n].to_vec();
                Ok((format!("tasks={}", n), cfg))
            }
            AblationGrid::LabeledSize(sizes) => {
                if sizes[idx] == 0 {
                    return Err(CoreError::invalid("labeled size must be >= 1".to_string()));
                }
                cfg.max_labeled = Some(sizes[idx]);
                Ok((format!("labeled={}", sizes[idx]), cfg))
            }
        }
    }
}

/// One result row; `config_json` carries the cell's full resolved config.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub cell: String,
    pub method: Method,
    pub seed: u64,
    pub best_val_mae: f64,
    pub test_mae: f64,
    pub test_mse: f64,
    pub wall_time_s: f64,
    pub config_json: String,
}

/// Run every cell of the grid against the base config, writing each run
/// under `out_dir/<cell>-<seed>/`.
pub fn run_ablation(
    grid: &AblationGrid,
    base: &TrainConfig,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    if grid.cells() == 0 {
        return Err(CoreError::invalid("ablation grid is empty".to_string()));
    }
    let mut rows = Vec::with_capacity(grid.cells());
    for idx in 0..grid.cells() {
        let (cell, cfg) = grid.instantiate(idx, base)?;
        let run_dir = out_dir.join(format!("{}-{}", cell.replace('=', "_"), cfg.seed));
        let (summary, _) = run_training(&cfg, &run_dir)?;
        rows.push(AblationRow {
            cell,
            method: cfg.method,
            seed: cfg.seed,
            best_val_mae: summary.best_val_mae,
            test_mae: summary.test_mae,
            test_mse: summary.test_mse,
            wall_time_s: summary.wall_time_s,
            config_json: serde_json::to_string(&cfg)?,
        });
    }
    Ok(rows)
}
