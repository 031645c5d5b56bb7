//! Dataset schema: clips, manifests and meta-feature normalization.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Prediction task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Intensity of persuasion: regression on vote change in `[-1, 1]`.
    #[serde(rename = "IPP")]
    Ipp,
    /// Debate outcome: does the clip belong to the winning side, `{0, 1}`.
    #[serde(rename = "DOP")]
    Dop,
}

impl Task {
    /// Maps a label into the `[0, 1]` space of sigmoid outputs.
    pub fn to_unit(self, label: f64) -> f64 {
        match self {
            Task::Ipp => (label + 1.0) / 2.0,
            Task::Dop => label,
        }
    }

    /// Inverse of [`Task::to_unit`].
    pub fn from_unit(self, p: f64) -> f64 {
        match self {
            Task::Ipp => 2.0 * p - 1.0,
            Task::Dop => p,
        }
    }

    pub fn check_label(self, label: f64) -> core::result::Result<(), String> {
        match self {
            Task::Ipp if !(-1.0..=1.0).contains(&label) => {
                Err(format!("IPP label {label} outside [-1, 1]"))
            }
            Task::Dop if label != 0.0 && label != 1.0 => Err(format!("DOP label {label} not in {{0, 1}}")),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Ipp => "IPP",
            Task::Dop => "DOP",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "A")]
    Acoustic,
    #[serde(rename = "V")]
    Visual,
    #[serde(rename = "L")]
    Language,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Acoustic, Modality::Visual, Modality::Language];

    pub fn index(self) -> usize {
        match self {
            Modality::Acoustic => 0,
            Modality::Visual => 1,
            Modality::Language => 2,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Modality::Acoustic => "A",
            Modality::Visual => "V",
            Modality::Language => "L",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Acoustic => "acoustic",
            Modality::Visual => "visual",
            Modality::Language => "language",
        }
    }
}

/// Per-timestep feature widths of the three streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub acoustic: usize,
    pub visual: usize,
    pub language: usize,
}

impl FeatureDims {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Acoustic => self.acoustic,
            Modality::Visual => self.visual,
            Modality::Language => self.language,
        }
    }
}

/// Number of debate meta features (initial vote score, speaking length).
pub const META_DIM: usize = 2;

/// One speaker clip.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureClip {
    pub episode_id: String,
    pub clip_id: String,
    pub speaker_id: String,
    /// `[T_A, d_A]`
    pub acoustic: Tensor,
    /// `[T_V, d_V]`
    pub visual: Tensor,
    /// `[T_L, d_L]`
    pub language: Tensor,
    pub meta: [f64; META_DIM],
    pub label: f64,
}

impl FeatureClip {
    pub fn sequence(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Acoustic => &self.acoustic,
            Modality::Visual => &self.visual,
            Modality::Language => &self.language,
        }
    }

    pub fn sequence_mut(&mut self, m: Modality) -> &mut Tensor {
        match m {
            Modality::Acoustic => &mut self.acoustic,
            Modality::Visual => &mut self.visual,
            Modality::Language => &mut self.language,
        }
    }

    pub fn seq_len(&self, m: Modality) -> usize {
        self.sequence(m).shape()[0]
    }

    /// Checks the per-clip invariants against a task and feature widths.
    pub fn validate(&self, task: Task, dims: &FeatureDims) -> Result<()> {
        let fail = |reason: String| Error::Clip {
            clip_id: self.clip_id.clone(),
            reason,
        };
        for m in Modality::ALL {
            let s = self.sequence(m);
            if s.rank() != 2 {
                return Err(fail(format!("{} features must be a matrix", m.name())));
            }
            if s.shape()[1] != dims.get(m) {
                return Err(fail(format!(
                    "{} dim {} != declared {}",
                    m.name(),
                    s.shape()[1],
                    dims.get(m)
                )));
            }
            if !s.is_finite() {
                return Err(fail(format!("non-finite {} features", m.name())));
            }
        }
        if self.meta.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite meta value".to_string()));
        }
        task.check_label(self.label).map_err(fail)
    }
}

/// A validated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub task: Task,
    pub dims: FeatureDims,
    /// Temporal episode order.
    pub episodes: Vec<String>,
    pub clips: Vec<FeatureClip>,
}

impl DatasetManifest {
    pub fn new(task: Task, dims: FeatureDims, episodes: Vec<String>, clips: Vec<FeatureClip>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if dims.acoustic == 0 || dims.visual == 0 || dims.language == 0 {
            return Err(Error::invalid("feature dims must be positive"));
        }
        let known: BTreeSet<&str> = episodes.iter().map(String::as_str).collect();
        if known.len() != episodes.len() {
            return Err(Error::invalid("duplicate episode id in episode list"));
        }
        let mut ids = BTreeSet::new();
        for clip in &clips {
            clip.validate(task, &dims)?;
            if !known.contains(clip.episode_id.as_str()) {
                return Err(Error::Clip {
                    clip_id: clip.clip_id.clone(),
                    reason: format!("episode `{}` not in episode list", clip.episode_id),
                });
            }
            if !ids.insert(clip.clip_id.as_str()) {
                return Err(Error::Clip {
                    clip_id: clip.clip_id.clone(),
                    reason: "duplicate clip id".to_string(),
                });
            }
        }
        Ok(DatasetManifest {
            task,
            dims,
            episodes,
            clips,
        })
    }

    /// Clips whose episode is in `episodes`, in manifest order.
    pub fn clips_in<'a>(&'a self, episodes: &[String]) -> Vec<&'a FeatureClip> {
        self.clips
            .iter()
            .filter(|c| episodes.iter().any(|e| *e == c.episode_id))
            .collect()
    }
}

/// Min-max scaler for the meta features, fitted on training clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaScaler {
    pub min: [f64; META_DIM],
    pub max: [f64; META_DIM],
}

impl MetaScaler {
    pub fn fit(train: &[&FeatureClip]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid("cannot fit meta normalization on an empty training set"));
        }
        let mut min = [f64::INFINITY; META_DIM];
        let mut max = [f64::NEG_INFINITY; META_DIM];
        for c in train {
            for j in 0..META_DIM {
                min[j] = min[j].min(c.meta[j]);
                max[j] = max[j].max(c.meta[j]);
            }
        }
        for j in 0..META_DIM {
            if max[j] == min[j] {
                log::warn!("meta feature {j} is constant on the training set; mapping it to 0.5");
            }
        }
        Ok(MetaScaler { min, max })
    }

    /// Scales into `[0, 1]`, clamping values outside the fitted range.
    /// A constant training feature maps to 0.5.
    pub fn apply(&self, meta: &[f64; META_DIM]) -> [f64; META_DIM] {
        let mut out = [0.0; META_DIM];
        for j in 0..META_DIM {
            let span = self.max[j] - self.min[j];
            out[j] = if span == 0.0 {
                0.5
            } else {
                ((meta[j] - self.min[j]) / span).clamp(0.0, 1.0)
            };
        }
        out
    }
}

/// Fits min-max scaling on `train` and applies it to copies of `apply_to`.
pub fn normalize_meta(train: &[&FeatureClip], apply_to: &[&FeatureClip]) -> Result<Vec<FeatureClip>> {
    let scaler = MetaScaler::fit(train)?;
    Ok(apply_to
        .iter()
        .map(|c| {
            let mut c = (*c).clone();
            c.meta = scaler.apply(&c.meta);
            c
        })
        .collect())
}
