//! Run configuration: one JSON document covering every stage, with dotted
//! key overrides and a seed taken from `CAIM_SEED`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::block::BlockMode;
use crate::data::{hash64, DatasetConfig};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "CAIM_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaimConfig {
    /// Blocks inserted after backbone blocks `1..=blocks`.
    pub blocks: usize,
    pub mode: BlockMode,
}

impl Default for CaimConfig {
    fn default() -> Self {
        CaimConfig { blocks: 3, mode: BlockMode::Conditional }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Disjoint identity folds of the eval split; 1 disables fold statistics.
    pub folds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { folds: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Every stage seed is derived from this value; section `seed` fields are
    /// overwritten by [`RunConfig::resolve`].
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub caim: CaimConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetConfig::default(),
            backbone: BackboneConfig::default(),
            pretrain: TrainConfig { epochs: 3, learning_rate: 1e-3, ..Default::default() },
            train: TrainConfig::default(),
            caim: CaimConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Rejects keys of `given` that `reference` does not have.
fn check_keys(given: &Value, reference: &Value, path: &str) -> Result<()> {
    if let (Value::Object(g), Value::Object(r)) = (given, reference) {
        for (k, v) in g {
            let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match r.get(k) {
                Some(rv) => check_keys(v, rv, &full)?,
                None => return Err(Error::Config(format!("unknown config key `{full}`"))),
            }
        }
    }
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let given: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        check_keys(&given, &Self::template(), "")?;
        serde_json::from_value(given).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn template() -> Value {
        serde_json::to_value(RunConfig::default()).expect("config serializes")
    }

    /// Applies `key.path=value` assignments in order. Values are parsed as
    /// JSON and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, assignments: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for a in assignments {
            let a = a.as_ref();
            let (key, raw) = a.split_once('=').ok_or_else(|| Error::Config(format!("override `{a}` is not key=value")))?;
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            }
            if slot.is_object() {
                return Err(Error::Config(format!("`{key}` is a section, not a value")));
            }
            *slot = parse_value(raw);
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("bad override value: {e}")))
    }

    /// Replaces the seed with `CAIM_SEED` when that variable is set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    /// Derives stage seeds and validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.dataset.seed = self.seed;
        self.pretrain.seed = hash64(&[self.seed, 0x9e7]);
        self.train.seed = hash64(&[self.seed, 0x7a1]);
        self.dataset.validate()?;
        self.backbone.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        let n = self.backbone.num_blocks();
        if self.caim.blocks == 0 || self.caim.blocks > n {
            return Err(Error::Config(format!("caim.blocks must be in 1..={n}, got {}", self.caim.blocks)));
        }
        if self.eval.folds == 0 {
            return Err(Error::Config("eval.folds must be at least 1".into()));
        }
        Ok(self)
    }

    /// Defaults or file, then `CAIM_SEED`, then overrides, then [`resolve`](Self::resolve).
    pub fn assemble<S: AsRef<str>>(file: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let base = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        base.with_env_seed()?.with_overrides(overrides)?.resolve()
    }

    pub fn backbone_seed(&self) -> u64 {
        hash64(&[self.seed, 0xb0b])
    }

    pub fn caim_seed(&self) -> u64 {
        hash64(&[self.seed, 0xca1])
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Writes the resolved configuration as `config.json` inside `dir`.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        fs::write(&path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
