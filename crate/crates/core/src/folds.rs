//! Episode-level train/validation/test fold plans.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::error::{Error, Result};

/// Episode roles for one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Fold {
    /// True when no episode holds two roles.
    pub fn is_disjoint(&self) -> bool {
        let roles = [&self.train, &self.val, &self.test];
        roles.iter().enumerate().all(|(i, a)| {
            roles[i + 1..]
                .iter()
                .all(|b| a.iter().all(|e| !b.contains(e)))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldScheme {
    Rolling,
    CrossValidation,
}

pub fn make_folds(manifest: &DatasetManifest, scheme: FoldScheme, n_folds: usize) -> Result<FoldPlan> {
    match scheme {
        FoldScheme::Rolling => make_rolling_folds(manifest, n_folds),
        FoldScheme::CrossValidation => make_cross_validation_folds(manifest, n_folds),
    }
}

/// Rolling-window folds over the last `n_folds` episodes: the fold testing
/// episode `E_i` trains on `E_1..E_{i-3}` and validates on `E_{i-2}, E_{i-1}`.
pub fn make_rolling_folds(manifest: &DatasetManifest, n_folds: usize) -> Result<FoldPlan> {
    rolling_folds(&manifest.episodes, n_folds)
}

pub fn rolling_folds(episodes: &[String], n_folds: usize) -> Result<FoldPlan> {
    if n_folds == 0 {
        return Err(Error::config("n_folds must be >= 1"));
    }
    let k = episodes.len();
    if k < n_folds + 3 {
        return Err(Error::TooFewEpisodes {
            have: k,
            need: n_folds + 3,
        });
    }
    let folds = (k - n_folds..k)
        .map(|t| Fold {
            train: episodes[..t - 2].to_vec(),
            val: episodes[t - 2..t].to_vec(),
            test: alloc::vec![episodes[t].clone()],
        })
        .collect();
    Ok(FoldPlan { folds })
}

/// Episode-grouped cross validation: contiguous groups; fold `g` tests on
/// group `g`, validates on group `g+1` (cyclically), trains on the rest.
pub fn make_cross_validation_folds(manifest: &DatasetManifest, n_folds: usize) -> Result<FoldPlan> {
    cross_validation_folds(&manifest.episodes, n_folds)
}

pub fn cross_validation_folds(episodes: &[String], n_folds: usize) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(Error::config(format!("cross validation needs n_folds >= 2, got {n_folds}")));
    }
    let k = episodes.len();
    if k < n_folds {
        return Err(Error::TooFewEpisodes { have: k, need: n_folds });
    }
    let (base, extra) = (k / n_folds, k % n_folds);
    let mut groups = Vec::with_capacity(n_folds);
    let mut start = 0;
    for g in 0..n_folds {
        let len = base + usize::from(g < extra);
        groups.push(episodes[start..start + len].to_vec());
        start += len;
    }
    let folds = (0..n_folds)
        .map(|g| {
            let v = (g + 1) % n_folds;
            let train = groups
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != g && i != v)
                .flat_map(|(_, grp)| grp.iter().cloned())
                .collect();
            Fold {
                train,
                val: groups[v].clone(),
                test: groups[g].clone(),
            }
        })
        .collect();
    Ok(FoldPlan { folds })
}
