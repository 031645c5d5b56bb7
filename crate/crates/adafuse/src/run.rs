//! Parallel execution of folds, grid cells and sweep entries.

use adafuse_core::data::DatasetManifest;
use adafuse_core::eval::{aggregate, run_fold, FoldReport};
use adafuse_core::folds::FoldPlan;
use adafuse_core::search::{
    finish_grid, grid_cell, sensitivity_cell, sensitivity_plan, sensitivity_report, Grid, GridResult,
    SensitivityReport,
};
use adafuse_core::trainer::{TrainConfig, TrainedModel};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "ADAFUSE_THREADS";

/// Thread pool sized by `ADAFUSE_THREADS`, or rayon's default when unset.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={v} is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Config(e.to_string()))
}

/// Runs every fold in parallel. Results are identical to the sequential
/// `run_folds` because each fold derives its own seed.
pub fn run_folds_parallel(
    manifest: &DatasetManifest,
    plan: &FoldPlan,
    config: &TrainConfig,
) -> Result<(FoldReport, Vec<TrainedModel>)> {
    let runs = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(i, f)| run_fold(manifest, f, i, config))
        .collect::<adafuse_core::Result<Vec<_>>>()?;
    let (results, models): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    Ok((aggregate(manifest.task, results)?, models))
}

pub fn grid_search_parallel(
    manifest: &DatasetManifest,
    plan: &FoldPlan,
    template: &TrainConfig,
    grid: &Grid,
) -> Result<GridResult> {
    grid.validate()?;
    let rows = grid
        .points()
        .into_par_iter()
        .map(|p| grid_cell(manifest, plan, template, p))
        .collect::<adafuse_core::Result<Vec<_>>>()?;
    Ok(finish_grid(manifest.task, template, rows)?)
}

pub fn sensitivity_parallel(
    manifest: &DatasetManifest,
    plan: &FoldPlan,
    config: &TrainConfig,
    delta: f64,
) -> Result<SensitivityReport> {
    if !delta.is_finite() {
        return Err(Error::Config("delta must be finite".into()));
    }
    // entry 0 is the unperturbed baseline
    let mut cells = vec![None];
    cells.extend(sensitivity_plan(delta).into_iter().map(Some));
    let means = cells
        .into_par_iter()
        .map(|cell| match cell {
            None => adafuse_core::eval::run_folds(manifest, plan, config).map(|r| r.mean),
            Some((p, d)) => sensitivity_cell(manifest, plan, config, p, d).map(|(_, r)| r.mean),
        })
        .collect::<adafuse_core::Result<Vec<f64>>>()?;
    Ok(sensitivity_report(config, delta, means[0], &means[1..])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use adafuse_core::eval::run_folds;
    use adafuse_core::folds::rolling_folds;
    use adafuse_core::search::{grid_search, sensitivity_sweep};
    use adafuse_core::synth::{generate, PerModality, SynthConfig};

    fn data() -> DatasetManifest {
        generate(&SynthConfig {
            n_episodes: 5,
            clips_per_episode: 3,
            seq_len: PerModality::splat([2, 3]),
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            slave_epochs: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let m = data();
        let plan = rolling_folds(&m.episodes, 2).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
        let (par, models) = pool.install(|| run_folds_parallel(&m, &plan, &quick())).unwrap();
        assert_eq!(par, run_folds(&m, &plan, &quick()).unwrap());
        assert_eq!(models.len(), 2);

        let grid = Grid {
            lr: vec![0.001, 0.002],
            gamma: vec![0.1],
            alpha: vec![0.5],
            beta: vec![50.0],
        };
        let g = pool.install(|| grid_search_parallel(&m, &plan, &quick(), &grid)).unwrap();
        assert_eq!(g, grid_search(&m, &plan, &quick(), &grid).unwrap());

        let s = pool.install(|| sensitivity_parallel(&m, &plan, &quick(), 0.05)).unwrap();
        assert_eq!(s, sensitivity_sweep(&m, &plan, &quick(), 0.05).unwrap());
    }
}
