//! CSV and JSON exports of fold reports, histories and sweeps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use adafuse_core::eval::FoldReport;
use adafuse_core::search::{GridResult, SensitivityReport};
use serde::Serialize;

use crate::error::{Error, Result};

pub const REPORT_CSV: &str = "report.csv";
pub const WEIGHTS_CSV: &str = "weights.csv";
pub const HISTORY_CSV: &str = "history.csv";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const ATTENTION_JSON: &str = "attention.json";
pub const CONFIG_JSON: &str = "config.json";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn write_rows<W: Write, T: Serialize>(out: W, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Serialize)]
struct ReportRow {
    fold: String,
    test_episodes: String,
    n_test: usize,
    metric: f64,
    val_metric: Option<f64>,
}

/// One row per fold followed by a `mean` row.
pub fn write_report<W: Write>(report: &FoldReport, out: W) -> Result<()> {
    let folds = report.folds.iter().map(|f| ReportRow {
        fold: f.fold.to_string(),
        test_episodes: f.test_episodes.join(" "),
        n_test: f.n_test,
        metric: f.metric,
        val_metric: Some(f.val_metric),
    });
    let mean = ReportRow {
        fold: "mean".into(),
        test_episodes: String::new(),
        n_test: report.folds.iter().map(|f| f.n_test).sum(),
        metric: report.mean,
        val_metric: None,
    };
    write_rows(out, folds.chain(std::iter::once(mean)))
}

#[derive(Serialize)]
struct WeightRow {
    fold: usize,
    #[serde(rename = "w_A")]
    w_a: f64,
    #[serde(rename = "w_V")]
    w_v: f64,
    #[serde(rename = "w_L")]
    w_l: f64,
}

/// Final modality weights, one row per fold.
pub fn write_weights<W: Write>(report: &FoldReport, out: W) -> Result<()> {
    write_rows(
        out,
        report.folds.iter().map(|f| WeightRow {
            fold: f.fold,
            w_a: f.weights[0],
            w_v: f.weights[1],
            w_l: f.weights[2],
        }),
    )
}

#[derive(Serialize)]
struct HistoryRow {
    fold: usize,
    epoch: usize,
    loss_final: f64,
    loss_pers: f64,
    loss_align: f64,
    val_metric: f64,
    #[serde(rename = "w_A")]
    w_a: f64,
    #[serde(rename = "w_V")]
    w_v: f64,
    #[serde(rename = "w_L")]
    w_l: f64,
    #[serde(rename = "ref_A")]
    ref_a: String,
    #[serde(rename = "ref_V")]
    ref_v: String,
    #[serde(rename = "ref_L")]
    ref_l: String,
}

/// Per-epoch training history of every fold. Reference losses are empty
/// when the reference models are disabled.
pub fn write_history<W: Write>(report: &FoldReport, out: W) -> Result<()> {
    let rows = report.folds.iter().flat_map(|f| {
        f.history.epochs.iter().map(move |e| {
            let r = |i: usize| fmt_opt(e.ref_losses.map(|l| l[i]));
            HistoryRow {
                fold: f.fold,
                epoch: e.epoch,
                loss_final: e.loss_final,
                loss_pers: e.loss_pers,
                loss_align: e.loss_align,
                val_metric: e.val_metric,
                w_a: e.weights[0],
                w_v: e.weights[1],
                w_l: e.weights[2],
                ref_a: r(0),
                ref_v: r(1),
                ref_l: r(2),
            }
        })
    });
    write_rows(out, rows)
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    fold: usize,
    episode_id: &'a str,
    clip_id: &'a str,
    y_true: f64,
    y_pred: f64,
}

/// Per-clip predicted vs actual values on every test clip.
pub fn write_predictions<W: Write>(report: &FoldReport, out: W) -> Result<()> {
    let rows = report.folds.iter().flat_map(|f| {
        f.predictions.iter().map(move |p| PredictionRow {
            fold: f.fold,
            episode_id: &p.episode_id,
            clip_id: &p.clip_id,
            y_true: p.y_true,
            y_pred: p.y_pred,
        })
    });
    write_rows(out, rows)
}

#[derive(Serialize)]
struct AttentionEntry<'a> {
    fold: usize,
    clip_id: &'a str,
    modality: &'static str,
    a: &'a [f64],
}

/// Temporal attention `a_t` per test clip and modality, as a JSON array.
pub fn write_attention<W: Write>(report: &FoldReport, out: W) -> Result<()> {
    let entries: Vec<AttentionEntry<'_>> = report
        .folds
        .iter()
        .flat_map(|f| {
            f.attention.iter().map(move |a| AttentionEntry {
                fold: f.fold,
                clip_id: &a.clip_id,
                modality: a.modality.short(),
                a: &a.a,
            })
        })
        .collect();
    Ok(serde_json::to_writer(out, &entries)?)
}

#[derive(Serialize)]
struct GridRowOut {
    lr: f64,
    gamma: f64,
    alpha: f64,
    beta: f64,
    mean_val: f64,
    mean_test: f64,
    best: bool,
}

pub fn write_grid<W: Write>(result: &GridResult, out: W) -> Result<()> {
    write_rows(
        out,
        result.rows.iter().map(|r| GridRowOut {
            lr: r.point.lr,
            gamma: r.point.gamma,
            alpha: r.point.alpha,
            beta: r.point.beta,
            mean_val: r.mean_val,
            mean_test: r.mean_test,
            best: r.point == result.best,
        }),
    )
}

#[derive(Serialize)]
struct SensitivityRowOut {
    param: &'static str,
    delta: f64,
    value: f64,
    baseline: f64,
    metric: f64,
    relative_change: f64,
}

pub fn write_sensitivity<W: Write>(report: &SensitivityReport, out: W) -> Result<()> {
    write_rows(
        out,
        report.rows.iter().map(|r| SensitivityRowOut {
            param: r.param.name(),
            delta: r.delta,
            value: r.value,
            baseline: report.baseline,
            metric: r.metric,
            relative_change: r.relative_change,
        }),
    )
}

/// Creates `path` and hands a buffered writer to `f`.
pub fn to_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes every fold-report export into `dir`.
pub fn write_run(report: &FoldReport, dir: &Path) -> Result<()> {
    to_file(&dir.join(REPORT_CSV), |w| write_report(report, w))?;
    to_file(&dir.join(WEIGHTS_CSV), |w| write_weights(report, w))?;
    to_file(&dir.join(HISTORY_CSV), |w| write_history(report, w))?;
    to_file(&dir.join(PREDICTIONS_CSV), |w| write_predictions(report, w))?;
    to_file(&dir.join(ATTENTION_JSON), |w| write_attention(report, w))
}
