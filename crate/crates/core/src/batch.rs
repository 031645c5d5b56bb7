//! Padding clips into masked mini-batches.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{FeatureClip, Modality, Task, META_DIM};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One modality's padded sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedSequences {
    /// `[B, T_max, d]`, zero beyond each sequence's length.
    pub features: Tensor,
    /// `[B * T_max]`, true on valid steps.
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
}

impl PaddedSequences {
    /// Pads `seqs` (each `[T_i, d]`) to `max(T_i)`, or to `min_len` if larger.
    pub fn pad(seqs: &[&Tensor], min_len: usize) -> Result<Self> {
        let first = seqs.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let d = first.cols();
        let t_max = seqs.iter().map(|s| s.shape()[0]).max().unwrap_or(0).max(min_len);
        let b = seqs.len();
        let mut data = vec![0.0; b * t_max * d];
        let mut mask = vec![false; b * t_max];
        let mut lengths = Vec::with_capacity(b);
        for (bi, s) in seqs.iter().enumerate() {
            if s.rank() != 2 || s.cols() != d {
                return Err(Error::shape("pad", alloc::format!("sequence {bi} has shape {:?}", s.shape())));
            }
            let t = s.shape()[0];
            data[bi * t_max * d..(bi * t_max + t) * d].copy_from_slice(s.data());
            mask[bi * t_max..bi * t_max + t].iter_mut().for_each(|m| *m = true);
            lengths.push(t);
        }
        Ok(PaddedSequences {
            features: Tensor::new(&[b, t_max, d], data)?,
            mask,
            lengths,
        })
    }

    pub fn max_len(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Model-ready mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBatch {
    pub task: Task,
    pub clip_ids: Vec<String>,
    /// Indexed by [`Modality::index`].
    pub streams: [PaddedSequences; 3],
    /// `[B, 2]`
    pub meta: Tensor,
    /// Labels mapped to `[0, 1]`, `[B, 1]`.
    pub targets: Tensor,
    /// Labels in the task's own space.
    pub labels: Vec<f64>,
}

impl ClipBatch {
    pub fn new(task: Task, clips: &[&FeatureClip]) -> Result<Self> {
        Self::padded(task, clips, 0)
    }

    /// Like [`ClipBatch::new`] but pads every stream to at least `min_len`.
    pub fn padded(task: Task, clips: &[&FeatureClip], min_len: usize) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let streams = [
            Modality::Acoustic,
            Modality::Visual,
            Modality::Language,
        ]
        .map(|m| {
            let seqs: Vec<&Tensor> = clips.iter().map(|c| c.sequence(m)).collect();
            PaddedSequences::pad(&seqs, min_len)
        });
        let [a, v, l] = streams;
        let meta: Vec<f64> = clips.iter().flat_map(|c| c.meta).collect();
        let labels: Vec<f64> = clips.iter().map(|c| c.label).collect();
        let targets = labels.iter().map(|&y| task.to_unit(y)).collect();
        Ok(ClipBatch {
            task,
            clip_ids: clips.iter().map(|c| c.clip_id.clone()).collect(),
            streams: [a?, v?, l?],
            meta: Tensor::new(&[clips.len(), META_DIM], meta)?,
            targets: Tensor::new(&[clips.len(), 1], targets)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.clip_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip_ids.is_empty()
    }

    pub fn stream(&self, m: Modality) -> &PaddedSequences {
        &self.streams[m.index()]
    }
}
