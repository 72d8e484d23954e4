//! Run configuration. Files are TOML restricted to dotted keys, e.g.
//!
//! ```toml
//! seed = 7
//! data = "synthetic"
//! model.d_model = 32
//! graph.density = 0.3
//! train.epochs = 300
//! ```
//!
//! Any key can be overridden with `key=value`; the override wins.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub density: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { density: 0.3 }
    }
}

/// Grids and training budget for the two sweeps. Each grid point trains
/// `seeds` independent replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub seeds: usize,
    pub gammas: Vec<f64>,
    pub densities: Vec<f64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn unit_grid(start: usize, end: usize) -> Vec<f64> {
    (start..=end).map(|i| i as f64 / 10.0).collect()
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            gammas: unit_grid(0, 10),
            densities: unit_grid(1, 10),
            model: ModelConfig { d_model: 8, n_heads: 2, n_blocks: 1, ..Default::default() },
            train: TrainConfig { epochs: 10, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// `"synthetic"` or a path to a cohort CSV.
    pub data: String,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub graph: GraphConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: "synthetic".into(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            graph: GraphConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Flat `dotted.key = value` listing, one key per line.
    pub fn to_toml_string(&self) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = String::new();
        flatten("", &value, &mut out);
        Ok(out)
    }

    /// Single-line JSON echo embedded in artifacts.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn is_synthetic(&self) -> bool {
        self.data == "synthetic"
    }

    /// Replaces the value at a dotted key. The value is read as a TOML
    /// literal, falling back to a bare string.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = parsed;
        *self = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sweep.model.validate()?;
        self.sweep.train.validate()?;
        if self.is_synthetic() {
            self.synth.validate()?;
            if self.synth.d_in != self.model.d_in || self.synth.d_in != self.sweep.model.d_in {
                return Err(Error::Config(format!(
                    "synth.d_in {} must equal model.d_in {} and sweep.model.d_in {}",
                    self.synth.d_in, self.model.d_in, self.sweep.model.d_in
                )));
            }
            if self.synth.t > self.model.t_max {
                return Err(Error::Config(format!("synth.t {} exceeds model.t_max {}", self.synth.t, self.model.t_max)));
            }
        }
        if !(0.0..=1.0).contains(&self.graph.density) {
            return Err(Error::Config(format!("graph.density {} outside [0, 1]", self.graph.density)));
        }
        if self.sweep.seeds == 0 {
            return Err(Error::Config("sweep.seeds must be positive".into()));
        }
        for &v in self.sweep.gammas.iter().chain(&self.sweep.densities) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("sweep grid value {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut String) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => {
            out.push_str(prefix);
            out.push_str(" = ");
            out.push_str(&other.to_string());
            out.push('\n');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GateMode;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn dotted_keys_parse() {
        let c = RunConfig::from_toml_str("seed = 3\nmodel.d_model = 16\ntrain.optimizer.lr = 0.01\nmodel.gate.mode = \"fixed\"\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.d_model, 16);
        assert_eq!(c.train.optimizer.lr, 0.01);
        assert_eq!(c.model.gate.mode, GateMode::Fixed);
        assert_eq!(c.model.n_heads, 4);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(RunConfig::from_toml_str("model.dmodel = 16").is_err());
        assert!(RunConfig::default().set("train.epoch", "3").is_err());
    }

    #[test]
    fn override_wins() {
        let mut c = RunConfig::from_toml_str("train.epochs = 5").unwrap();
        c.apply_overrides(&["train.epochs=9", "train.optimizer.lr=1", "data=foo.csv", "sweep.gammas=[0.0, 1.0]"]).unwrap();
        assert_eq!(c.train.epochs, 9);
        assert_eq!(c.train.optimizer.lr, 1.0);
        assert_eq!(c.data, "foo.csv");
        assert_eq!(c.sweep.gammas, vec![0.0, 1.0]);
        assert!(c.apply_overrides(&["train.epochs"]).is_err());
        assert!(c.apply_overrides(&["train.epochs=-1"]).is_err());
    }

    #[test]
    fn flat_listing_roundtrips() {
        let mut c = RunConfig::default();
        c.seed = 11;
        c.graph.density = 0.7;
        let text = c.to_toml_string().unwrap();
        assert!(text.lines().all(|l| !l.starts_with('[')));
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn validation_catches_mismatch() {
        let mut c = RunConfig::default();
        c.synth.d_in = 3;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.sweep.densities.push(1.5);
        assert!(c.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
