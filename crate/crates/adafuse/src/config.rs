//! Run configuration files.
//!
//! A run config is one flat JSON object: every [`TrainConfig`] key plus the
//! run-level keys `data`, `out`, `fold_scheme` and `n_folds`. Unknown keys
//! are rejected and omitted keys take their defaults.

use std::fs;
use std::path::{Path, PathBuf};

use adafuse_core::folds::FoldScheme;
use adafuse_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunKeys {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    fold_scheme: FoldScheme,
    n_folds: usize,
}

impl Default for RunKeys {
    fn default() -> Self {
        RunKeys {
            data: None,
            out: None,
            fold_scheme: FoldScheme::Rolling,
            n_folds: 10,
        }
    }
}

const RUN_KEYS: [&str; 4] = ["data", "out", "fold_scheme", "n_folds"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub fold_scheme: FoldScheme,
    pub n_folds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let keys = RunKeys::default();
        RunConfig {
            train: TrainConfig::default(),
            data: keys.data,
            out: keys.out,
            fold_scheme: keys.fold_scheme,
            n_folds: keys.n_folds,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(config_err)?;
        let Value::Object(mut all) = value else {
            return Err(Error::Config("run config must be a JSON object".into()));
        };
        let mut run = Map::new();
        for key in RUN_KEYS {
            if let Some(v) = all.remove(key) {
                run.insert(key.to_string(), v);
            }
        }
        let keys: RunKeys = serde_json::from_value(Value::Object(run)).map_err(config_err)?;
        let train: TrainConfig = serde_json::from_value(Value::Object(all)).map_err(config_err)?;
        let cfg = RunConfig {
            train,
            data: keys.data,
            out: keys.out,
            fold_scheme: keys.fold_scheme,
            n_folds: keys.n_folds,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_folds == 0 {
            return Err(Error::Config("n_folds must be >= 1".into()));
        }
        Ok(self.train.validate()?)
    }

    /// The flat JSON form, as accepted by [`RunConfig::from_json`].
    pub fn to_json(&self) -> Value {
        let mut obj = match serde_json::to_value(&self.train).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("TrainConfig is a struct"),
        };
        let keys = RunKeys {
            data: self.data.clone(),
            out: self.out.clone(),
            fold_scheme: self.fold_scheme,
            n_folds: self.n_folds,
        };
        if let Value::Object(m) = serde_json::to_value(keys).expect("keys serialize") {
            obj.extend(m);
        }
        Value::Object(obj)
    }
}
