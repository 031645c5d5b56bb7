//! Hyperparameter grid search and the ±delta sensitivity sweep.
//!
//! Each grid cell and each sweep entry is an independent fold run, so the
//! per-cell functions are public for callers that want to run them in
//! parallel and then combine them with [`select_best`] or
//! [`sensitivity_report`].

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Task};
use crate::error::{Error, Result};
use crate::eval::{run_folds, FoldReport};
use crate::folds::FoldPlan;
use crate::metrics;
use crate::trainer::TrainConfig;

/// Candidate values per hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub lr: Vec<f64>,
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl GridPoint {
    pub fn of(config: &TrainConfig) -> Self {
        GridPoint {
            lr: config.lr,
            gamma: config.gamma,
            alpha: config.alpha,
            beta: config.beta,
        }
    }

    pub fn apply(&self, template: &TrainConfig) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            gamma: self.gamma,
            alpha: self.alpha,
            beta: self.beta,
            ..template.clone()
        }
    }

    fn key(&self) -> [f64; 4] {
        [self.lr, self.gamma, self.alpha, self.beta]
    }

    /// Lexicographic order on `(lr, gamma, alpha, beta)`.
    pub fn lex_cmp(&self, other: &GridPoint) -> Ordering {
        self.key()
            .iter()
            .zip(other.key().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

impl Grid {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr", &self.lr), ("gamma", &self.gamma), ("alpha", &self.alpha), ("beta", &self.beta)] {
            if v.is_empty() {
                return Err(Error::config(format!("grid for {name} is empty")));
            }
        }
        Ok(())
    }

    /// Cartesian product in `(lr, gamma, alpha, beta)` nesting order.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &lr in &self.lr {
            for &gamma in &self.gamma {
                for &alpha in &self.alpha {
                    for &beta in &self.beta {
                        out.push(GridPoint { lr, gamma, alpha, beta });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: GridPoint,
    pub fold_val: Vec<f64>,
    pub mean_val: f64,
    pub mean_test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: GridPoint,
    pub best_config: TrainConfig,
    pub rows: Vec<GridRow>,
}

/// Trains and evaluates one grid point on every fold.
pub fn grid_cell(
    manifest: &DatasetManifest,
    plan: &FoldPlan,
    template: &TrainConfig,
    point: GridPoint,
) -> Result<GridRow> {
    let report = run_folds(manifest, plan, &point.apply(template))?;
    let fold_val: Vec<f64> = report.folds.iter().map(|f| f.val_metric).collect();
    let mean_val = fold_val.iter().sum::<f64>() / fold_val.len() as f64;
    Ok(GridRow {
        point,
        fold_val,
        mean_val,
        mean_test: report.mean,
    })
}

/// Index of the row with the best mean validation metric. Ties go to the
/// lexicographically smallest point.
pub fn select_best(task: Task, rows: &[GridRow]) -> Result<usize> {
    if rows.is_empty() {
        return Err(Error::config("grid is empty"));
    }
    let mut best = 0;
    for (i, r) in rows.iter().enumerate().skip(1) {
        let b = &rows[best];
        if metrics::is_better(task, r.mean_val, b.mean_val)
            || (r.mean_val == b.mean_val && r.point.lex_cmp(&b.point).is_lt())
        {
            best = i;
        }
    }
    Ok(best)
}

pub fn grid_search(
    manifest: &DatasetManifest,
    plan: &FoldPlan,
    template: &TrainConfig,
    grid: &Grid,
) -> Result<GridResult> {
    grid.validate()?;
    let rows = grid
        .points()
        .into_iter()
        .map(|p| grid_cell(manifest, plan, template, p))
        .collect::<Result<Vec<_>>>()?;
    finish_grid(manifest.task, template, rows)
}

/// Picks the winner from completed rows.
pub fn finish_grid(task: Task, template: &TrainConfig, rows: Vec<GridRow>) -> Result<GridResult> {
    let best = rows[select_best(task, &rows)?].point;
    Ok(GridResult {
        best,
        best_config: best.apply(template),
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensParam {
    Alpha,
    Beta,
    Gamma,
}

impl SensParam {
    pub const ALL: [SensParam; 3] = [SensParam::Alpha, SensParam::Beta, SensParam::Gamma];

    pub fn name(self) -> &'static str {
        match self {
            SensParam::Alpha => "alpha",
            SensParam::Beta => "beta",
            SensParam::Gamma => "gamma",
        }
    }

    pub fn get(self, config: &TrainConfig) -> f64 {
        match self {
            SensParam::Alpha => config.alpha,
            SensParam::Beta => config.beta,
            SensParam::Gamma => config.gamma,
        }
    }

    /// `config` with this parameter scaled by `1 + delta`.
    pub fn perturb(self, config: &TrainConfig, delta: f64) -> TrainConfig {
        let mut c = config.clone();
        let v = self.get(config) * (1.0 + delta);
        match self {
            SensParam::Alpha => c.alpha = v,
            SensParam::Beta => c.beta = v,
            SensParam::Gamma => c.gamma = v,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub param: SensParam,
    /// Signed relative perturbation, e.g. `0.05` or `-0.05`.
    pub delta: f64,
    pub value: f64,
    pub metric: f64,
    /// `(metric - baseline) / |baseline|`.
    pub relative_change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub baseline: f64,
    pub rows: Vec<SensitivityRow>,
}

/// The `(param, signed delta)` pairs of a sweep, `+delta` before `-delta`.
pub fn sensitivity_plan(delta: f64) -> Vec<(SensParam, f64)> {
    SensParam::ALL.iter().flat_map(|&p| [(p, delta), (p, -delta)]).collect()
}

pub fn relative_change(metric: f64, baseline: f64) -> Result<f64> {
    if metric == baseline {
        return Ok(0.0);
    }
    if baseline == 0.0 {
        return Err(Error::invalid("baseline metric is 0"));
    }
    Ok((metric - baseline) / libm::fabs(baseline))
}

/// Mean test metric with one parameter perturbed.
pub fn sensitivity_cell(
    manifest: &DatasetManifest,
    plan: &FoldPlan,
    config: &TrainConfig,
    param: SensParam,
    delta: f64,
) -> Result<(TrainConfig, FoldReport)> {
    let cfg = param.perturb(config, delta);
    let report = run_folds(manifest, plan, &cfg)?;
    Ok((cfg, report))
}

/// Assembles the report from the baseline and the per-entry metrics, which
/// must follow [`sensitivity_plan`] order.
pub fn sensitivity_report(
    config: &TrainConfig,
    delta: f64,
    baseline: f64,
    metrics: &[f64],
) -> Result<SensitivityReport> {
    let plan = sensitivity_plan(delta);
    if plan.len() != metrics.len() {
        return Err(Error::invalid(format!("{} sweep entries, {} metrics", plan.len(), metrics.len())));
    }
    let rows = plan
        .into_iter()
        .zip(metrics)
        .map(|((param, d), &metric)| {
            Ok(SensitivityRow {
                param,
                delta: d,
                value: param.get(&param.perturb(config, d)),
                metric,
                relative_change: relative_change(metric, baseline)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityReport { baseline, rows })
}

pub fn sensitivity_sweep(
    manifest: &DatasetManifest,
    plan: &FoldPlan,
    config: &TrainConfig,
    delta: f64,
) -> Result<SensitivityReport> {
    if !delta.is_finite() {
        return Err(Error::config("delta must be finite"));
    }
    let baseline = run_folds(manifest, plan, config)?.mean;
    let metrics = sensitivity_plan(delta)
        .into_iter()
        .map(|(p, d)| sensitivity_cell(manifest, plan, config, p, d).map(|(_, r)| r.mean))
        .collect::<Result<Vec<_>>>()?;
    sensitivity_report(config, delta, baseline, &metrics)
}
