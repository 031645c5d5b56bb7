//! Fold orchestration and per-clip diagnostics.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{normalize_meta, DatasetManifest, FeatureClip, Modality, Task};
use crate::encoder::temporal_attention;
use crate::error::{Error, Result};
use crate::folds::{Fold, FoldPlan};
use crate::metrics;
use crate::trainer::{evaluate, train, ClipInference, TrainConfig, TrainHistory, TrainedModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipPrediction {
    pub clip_id: String,
    pub episode_id: String,
    pub y_true: f64,
    pub y_pred: f64,
}

/// Temporal attention `a_t` of one clip and modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipAttention {
    pub clip_id: String,
    pub modality: Modality,
    pub a: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_episodes: Vec<String>,
    /// Test MSE (IPP) or accuracy (DOP).
    pub metric: f64,
    /// Same metric on the validation episodes, used for model selection.
    pub val_metric: f64,
    pub n_test: usize,
    pub weights: [f64; 3],
    pub history: TrainHistory,
    pub predictions: Vec<ClipPrediction>,
    pub attention: Vec<ClipAttention>,
    /// Mean pairwise cosine similarity of the shared projections on the
    /// test clips, when the alignment module ran.
    pub test_alignment: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub task: Task,
    pub folds: Vec<FoldResult>,
    /// Arithmetic mean of the per-fold metrics.
    pub mean: f64,
}

impl FoldReport {
    pub fn metrics(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.metric).collect()
    }
}

/// Clips of one fold with meta features normalized on its training part.
pub struct FoldData {
    pub train: Vec<FeatureClip>,
    pub val: Vec<FeatureClip>,
    pub test: Vec<FeatureClip>,
}

impl FoldData {
    pub fn new(manifest: &DatasetManifest, fold: &Fold) -> Result<Self> {
        if !fold.is_disjoint() {
            return Err(Error::invalid("fold assigns an episode to more than one role"));
        }
        let train = manifest.clips_in(&fold.train);
        let val = manifest.clips_in(&fold.val);
        let test = manifest.clips_in(&fold.test);
        if train.is_empty() || val.is_empty() || test.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(FoldData {
            train: normalize_meta(&train, &train)?,
            val: normalize_meta(&train, &val)?,
            test: normalize_meta(&train, &test)?,
        })
    }

    pub fn refs(set: &[FeatureClip]) -> Vec<&FeatureClip> {
        set.iter().collect()
    }
}

/// Seed used for fold `index`, so folds stay independent.
pub fn fold_seed(root: u64, index: usize) -> u64 {
    root.wrapping_add(index as u64)
}

/// Trains on one fold and evaluates on its test episodes.
pub fn run_fold(
    manifest: &DatasetManifest,
    fold: &Fold,
    index: usize,
    config: &TrainConfig,
) -> Result<(FoldResult, TrainedModel)> {
    let data = FoldData::new(manifest, fold)?;
    let cfg = TrainConfig {
        seed: fold_seed(config.seed, index),
        ..config.clone()
    };
    let trained = train(
        &cfg,
        manifest.task,
        manifest.dims,
        &FoldData::refs(&data.train),
        &FoldData::refs(&data.val),
    )?;
    let val_metric = evaluate(&trained.model, &FoldData::refs(&data.val), trained.inference_weights())?;
    let test = FoldData::refs(&data.test);
    let inf = trained.predict(&test)?;
    let result = fold_result(manifest.task, index, fold, &test, &inf, &trained, val_metric)?;
    Ok((result, trained))
}

fn fold_result(
    task: Task,
    index: usize,
    fold: &Fold,
    test: &[&FeatureClip],
    inf: &ClipInference,
    trained: &TrainedModel,
    val_metric: f64,
) -> Result<FoldResult> {
    let metric = metrics::task_metric(task, &inf.labels, &inf.predictions)?;
    let predictions = test
        .iter()
        .zip(&inf.predictions)
        .map(|(c, &p)| ClipPrediction {
            clip_id: c.clip_id.clone(),
            episode_id: c.episode_id.clone(),
            y_true: c.label,
            y_pred: p,
        })
        .collect();
    let mut attention = Vec::new();
    for m in Modality::ALL {
        for (c, rec) in test.iter().zip(&inf.attention[m.index()]) {
            attention.push(ClipAttention {
                clip_id: c.clip_id.clone(),
                modality: m,
                a: temporal_attention(rec),
            });
        }
    }
    let test_alignment = inf.shared.as_ref().map(|s| {
        crate::alignment::mean_pairwise_cosine(&[s[0].data(), s[1].data(), s[2].data()], s[0].cols())
    });
    Ok(FoldResult {
        fold: index,
        test_episodes: fold.test.clone(),
        metric,
        val_metric,
        n_test: test.len(),
        weights: trained.inference_weights(),
        history: trained.history.clone(),
        predictions,
        attention,
        test_alignment,
    })
}

/// Runs every fold of `plan` in order.
pub fn run_folds(manifest: &DatasetManifest, plan: &FoldPlan, config: &TrainConfig) -> Result<FoldReport> {
    let folds = plan
        .folds
        .iter()
        .enumerate()
        .map(|(i, f)| run_fold(manifest, f, i, config).map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    aggregate(manifest.task, folds)
}

/// Builds a report from per-fold results (in any order).
pub fn aggregate(task: Task, mut folds: Vec<FoldResult>) -> Result<FoldReport> {
    if folds.is_empty() {
        return Err(Error::invalid("no folds"));
    }
    folds.sort_by_key(|f| f.fold);
    let mean = folds.iter().map(|f| f.metric).sum::<f64>() / folds.len() as f64;
    Ok(FoldReport { task, folds, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::folds::rolling_folds;
    use crate::synth::{generate, PerModality, SynthConfig};

    fn data() -> DatasetManifest {
        generate(&SynthConfig {
            n_episodes: 5,
            clips_per_episode: 4,
            seq_len: PerModality::splat([2, 4]),
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
    fn one_fold_report() {
        let m = data();
        let plan = rolling_folds(&m.episodes, 1).unwrap();
        let r = run_folds(&m, &plan, &quick()).unwrap();
        assert_eq!(r.folds.len(), 1);
        assert_eq!(r.mean, r.folds[0].metric);
        let f = &r.folds[0];
        assert_eq!(f.predictions.len(), 4);
        assert_eq!(f.attention.len(), 12);
        // recompute the metric from the exported predictions
        let y: Vec<f64> = f.predictions.iter().map(|p| p.y_true).collect();
        let p: Vec<f64> = f.predictions.iter().map(|p| p.y_pred).collect();
        assert!((metrics::mse(&y, &p).unwrap() - f.metric).abs() < 1e-12);
        for a in &f.attention {
            let clip = m.clips.iter().find(|c| c.clip_id == a.clip_id).unwrap();
            assert_eq!(a.a.len(), clip.seq_len(a.modality));
            assert!((a.a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn repeatable() {
        let m = data();
        let plan = rolling_folds(&m.episodes, 2).unwrap();
        let a = run_folds(&m, &plan, &quick()).unwrap();
        let b = run_folds(&m, &plan, &quick()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.folds.len(), 2);
    }

    #[test]
    fn test_episodes_do_not_influence_training() {
        let m = data();
        let plan = rolling_folds(&m.episodes, 1).unwrap();
        let fold = &plan.folds[0];
        let (_, base) = run_fold(&m, fold, 0, &quick()).unwrap();

        let mut altered = m.clone();
        for c in altered.clips.iter_mut().filter(|c| fold.test.contains(&c.episode_id)) {
            c.label = -c.label;
            c.meta = [0.999, 299.0];
            c.visual = c.visual.map(|v| v * 3.0 + 1.0);
            c.acoustic = c.acoustic.map(|v| -v);
        }
        let (_, other) = run_fold(&altered, fold, 0, &quick()).unwrap();
        assert_eq!(base.model.params.fingerprint(), other.model.params.fingerprint());
        assert_eq!(base.history, other.history);
    }
}
