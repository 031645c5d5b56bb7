//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "ADAFUSE\0"
//! version  u32
//! hlen     u64      length of the JSON header
//! header   hlen bytes of UTF-8 JSON
//! payload  f64 LE values of every tensor listed in the header, in order
//! ```
//!
//! The header carries the model config, the modality weights and the
//! `(name, shape)` of each tensor. Tensors are the fusion parameters, the
//! batch-norm running statistics (`<bn>.running_mean`, `<bn>.running_var`)
//! and, when present, the reference-model parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use adafuse_core::data::Modality;
use adafuse_core::fusion::{M2P2Model, ModelConfig};
use adafuse_core::heterogeneity::{ModalityWeights, ReferenceModel};
use adafuse_core::params::ParamStore;
use adafuse_core::trainer::{TrainHistory, TrainedModel};
use adafuse_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"ADAFUSE\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    weights: ModalityWeights,
    /// Dropout rate of the reference models, when they are stored.
    reference_dropout: Option<f64>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn bn_name(m: Modality, stat: &str) -> String {
    format!("encoder.{}.embed_bn.{stat}", m.short())
}

fn named_tensors(trained: &TrainedModel) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> =
        trained.model.params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
    for enc in &trained.model.encoders {
        let r = &enc.embed_norm.running;
        let vec = |v: &[f64]| Tensor::new(&[v.len()], v.to_vec()).expect("1-d shape matches");
        out.push((bn_name(enc.modality, "running_mean"), vec(&r.mean)));
        out.push((bn_name(enc.modality, "running_var"), vec(&r.var)));
    }
    if let Some(refs) = &trained.references {
        for r in refs {
            out.extend(r.params.iter().map(|(_, n, t)| (n.to_string(), t.clone())));
        }
    }
    out
}

pub fn write_checkpoint<W: Write>(trained: &TrainedModel, mut out: W) -> std::io::Result<()> {
    let tensors = named_tensors(trained);
    let header = Header {
        model: trained.model.config.clone(),
        weights: trained.weights.clone(),
        reference_dropout: trained.references.as_ref().map(|r| r[0].dropout),
        tensors: tensors
            .iter()
            .map(|(name, t)| Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, t) in &tensors {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(buf)
}

fn fill(store: &mut ParamStore, name: &str, t: Tensor, seen: &mut usize) -> Result<()> {
    store.set(name, t).map_err(bad)?;
    *seen += 1;
    Ok(())
}

/// Reads a checkpoint. The returned model has an empty history.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<TrainedModel> {
    if read_exact(&mut input, 8)? != MAGIC {
        return Err(bad("not an adafuse checkpoint"));
    }
    let version = u32::from_le_bytes(read_exact(&mut input, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(read_exact(&mut input, 8)?.try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| bad("header too large"))?;
    let header: Header =
        serde_json::from_slice(&read_exact(&mut input, hlen)?).map_err(|e| bad(format!("header: {e}")))?;

    // Values are overwritten below; the seed only fixes the throwaway init.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = M2P2Model::new(header.model, &mut rng);
    let mut references = header
        .reference_dropout
        .map(|d| Modality::ALL.map(|m| ReferenceModel::new(m, d, &mut rng)));
    let expected = model.params.len()
        + 2 * Modality::ALL.len()
        + references.as_ref().map_or(0, |r| r.iter().map(|m| m.params.len()).sum());
    if header.tensors.len() != expected {
        return Err(bad(format!("{} tensors, expected {expected}", header.tensors.len())));
    }

    let mut seen = 0;
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let bytes = read_exact(&mut input, n * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&entry.shape, data).map_err(|e| bad(e.to_string()))?;
        let name = entry.name.as_str();
        if let Some(enc) = model
            .encoders
            .iter_mut()
            .find(|e| name.starts_with(&format!("encoder.{}.embed_bn.running_", e.modality.short())))
        {
            let running = &mut enc.embed_norm.running;
            let target = if name.ends_with("running_mean") { &mut running.mean } else { &mut running.var };
            if target.len() != t.numel() {
                return Err(bad(format!("{name}: length {} != {}", t.numel(), target.len())));
            }
            target.copy_from_slice(t.data());
            seen += 1;
        } else if name.starts_with("ref.") {
            let refs = references.as_mut().ok_or_else(|| bad(format!("unexpected {name}")))?;
            let r = refs
                .iter_mut()
                .find(|r| name.starts_with(&format!("ref.{}.", r.modality.short())))
                .ok_or_else(|| bad(format!("unknown tensor {name}")))?;
            fill(&mut r.params, name, t, &mut seen)?;
        } else {
            fill(&mut model.params, name, t, &mut seen)?;
        }
    }
    if seen != expected {
        return Err(bad("missing tensors"));
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest).map_err(|e| bad(e.to_string()))?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(TrainedModel {
        model,
        references,
        weights: header.weights,
        history: TrainHistory::default(),
    })
}

pub fn save_checkpoint(trained: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(trained, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
