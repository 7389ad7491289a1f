use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::buffer;
use crate::error::{Error, Result};
use crate::importance::{PenaltyMode, DEFAULT_LAMBDA};
use crate::plateau;
use crate::stream::{DataSpec, StreamSpec};
use crate::vit::ViTConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    OnlineLora,
    /// Trains every weight, no adapters.
    ContinualFt,
    /// Trains the classifier head only.
    FrozenFt,
    /// Never updates.
    RandomHead,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::OnlineLora,
        Method::ContinualFt,
        Method::FrozenFt,
        Method::RandomHead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::OnlineLora => "online-lora",
            Method::ContinualFt => "continual-ft",
            Method::FrozenFt => "frozen-ft",
            Method::RandomHead => "random-head",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "method {s:?} (expected online-lora|continual-ft|frozen-ft|random-head)"
                ))
            })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything that defines a run. Serialized as TOML; every field has a
/// default, so a config file only lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub rank: usize,
    pub lambda: f64,
    pub lr: f64,
    pub mean_threshold: f64,
    pub var_threshold: f64,
    pub window: usize,
    pub buffer_size: usize,
    /// Batches between accuracy-trace evaluations.
    pub eval_every: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub penalty_mode: PenaltyMode,
    pub out_dir: PathBuf,
    pub data: DataSpec,
    pub stream: StreamSpec,
    pub model: ViTConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::OnlineLora,
            rank: 4,
            lambda: DEFAULT_LAMBDA,
            lr: 2e-4,
            mean_threshold: 0.5,
            var_threshold: 0.02,
            window: plateau::DEFAULT_CAPACITY,
            buffer_size: buffer::DEFAULT_CAPACITY,
            eval_every: 10,
            epochs: 1,
            seeds: vec![0],
            penalty_mode: PenaltyMode::Deviation,
            out_dir: PathBuf::from("runs"),
            data: DataSpec::default(),
            stream: StreamSpec::default(),
            model: ViTConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stream.validate()?;
        let positive = [
            ("lambda", self.lambda),
            ("lr", self.lr),
            ("mean_threshold", self.mean_threshold),
            ("var_threshold", self.var_threshold),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.rank == 0 || self.rank * 4 > self.model.embed_dim {
            return Err(Error::config(format!(
                "rank {} outside 1..={}",
                self.rank,
                self.model.embed_dim / 4
            )));
        }
        if self.window < 2 {
            return Err(Error::config("window must hold at least 2 losses"));
        }
        if self.buffer_size == 0 || self.eval_every == 0 {
            return Err(Error::config("buffer_size and eval_every must be positive"));
        }
        if self.epochs != 1 {
            return Err(Error::config(format!(
                "epochs = {}: online streams are seen exactly once",
                self.epochs
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.model.num_classes != self.data.class_count {
            return Err(Error::config(format!(
                "model.num_classes {} != data.class_count {}",
                self.model.num_classes, self.data.class_count
            )));
        }
        if self.model.image_size != self.data.image_size || self.model.channels != 1 {
            return Err(Error::config("model input must match the 1-channel dataset images"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.lambda, cfg.buffer_size, cfg.lr, cfg.rank), (2000.0, 4, 2e-4, 4));
        assert_eq!(cfg.stream.batch_size, 64);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_toml_and_errors() {
        let cfg = ExperimentConfig::from_toml("method = \"frozen-ft\"\n[stream]\nnum_tasks = 4\n").unwrap();
        assert_eq!(cfg.method, Method::FrozenFt);
        assert_eq!(cfg.stream.num_tasks, 4);
        assert!(ExperimentConfig::from_toml("bogus = 1").unwrap_err().is_config());
        let bad = ExperimentConfig { lr: 0.0, ..Default::default() };
        assert!(bad.validate().unwrap_err().is_config());
        let bad = ExperimentConfig { rank: 17, ..Default::default() };
        assert!(bad.validate().unwrap_err().is_config());
    }
}
