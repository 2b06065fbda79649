//! Run configuration: a line-oriented `key=value` file merged with
//! command-line overrides. Unknown keys are rejected; every run logs the
//! fully-resolved result.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{HeadKind, ModelConfig};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("config line {0}: expected key=value, got {1:?}")]
    BadLine(usize, String),
    #[error("unknown config key {key:?}; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },
    #[error("bad value for {0}: {1}")]
    BadValue(String, String),
}

pub const CONFIG_KEYS: [&str; 22] = [
    "head",
    "seed",
    "batch_size",
    "lr",
    "max_epochs",
    "patience",
    "num_classes",
    "conv_layers",
    "filters",
    "kernel",
    "pool",
    "embed_dim",
    "recurrent_hidden",
    "transformer_d_model",
    "transformer_ffn_hidden",
    "transformer_heads",
    "transformer_layers",
    "fc1_dim",
    "fc2_dim",
    "manifest",
    "split",
    "cache_dir",
];

/// Merged view of model + training configuration plus input paths.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub manifest: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(head: HeadKind) -> Self {
        Self {
            model: ModelConfig::canonical(head, 0),
            train: TrainConfig::default(),
            manifest: None,
            split: None,
            cache_dir: None,
        }
    }

    /// Keep the model-init seed and the shuffle seed in lockstep.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(path.display().to_string(), e))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::BadLine(i + 1, line.to_string()))?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |v: &str| ConfigError::BadValue(key.to_string(), v.to_string());
        match key {
            "seed" => {
                let seed = value.parse::<u64>().map_err(|_| bad(value))?;
                self.set_seed(seed);
            }
            "batch_size" => self.train.batch_size = parse_positive(key, value)?,
            "lr" => {
                let lr = value.parse::<f64>().map_err(|_| bad(value))?;
                if !lr.is_finite() || lr < 0.0 {
                    return Err(bad(value));
                }
                self.train.lr = lr;
            }
            "max_epochs" => self.train.max_epochs = parse_positive(key, value)?,
            "patience" => self.train.patience = parse_positive(key, value)?,
            "pool" => {
                // The pooling window is fixed; the key exists so configs can
                // state it explicitly.
                if value != "2" {
                    return Err(ConfigError::BadValue(key.into(), format!("{value:?} (only 2 is supported)")));
                }
            }
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "split" => self.split = Some(PathBuf::from(value)),
            "cache_dir" => self.cache_dir = Some(PathBuf::from(value)),
            "head" | "num_classes" | "conv_layers" | "filters" | "kernel" | "embed_dim"
            | "recurrent_hidden" | "transformer_d_model" | "transformer_ffn_hidden"
            | "transformer_heads" | "transformer_layers" | "fc1_dim" | "fc2_dim" => {
                self.model
                    .apply_kv(key, value)
                    .map_err(|e| ConfigError::BadValue(key.to_string(), e.to_string()))?;
            }
            other => {
                return Err(ConfigError::UnknownKey {
                    key: other.to_string(),
                    valid: CONFIG_KEYS.join(", "),
                })
            }
        }
        Ok(())
    }

    /// Fully-resolved `key=value` lines, one per known key.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.model.to_kv() {
            out.push_str(&format!("{k}={v}\n"));
        }
        out.push_str(&format!("batch_size={}\n", self.train.batch_size));
        out.push_str(&format!("lr={}\n", self.train.lr));
        out.push_str(&format!("max_epochs={}\n", self.train.max_epochs));
        out.push_str(&format!("patience={}\n", self.train.patience));
        out.push_str("pool=2\n");
        if let Some(p) = &self.manifest {
            out.push_str(&format!("manifest={}\n", p.display()));
        }
        if let Some(p) = &self.split {
            out.push_str(&format!("split={}\n", p.display()));
        }
        if let Some(p) = &self.cache_dir {
            out.push_str(&format!("cache_dir={}\n", p.display()));
        }
        out
    }
}

fn parse_positive(key: &str, value: &str) -> Result<usize, ConfigError> {
    let v = value
        .parse::<usize>()
        .map_err(|_| ConfigError::BadValue(key.to_string(), value.to_string()))?;
    if v == 0 {
        return Err(ConfigError::BadValue(key.to_string(), "must be positive".into()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_are_applied_and_flags_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nbatch_size=8\nlr=0.001\nhead=transformer\n\nseed=5\n").unwrap();
        let mut cfg = RunConfig::new(HeadKind::Lstm);
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.model.head, HeadKind::Transformer);
        assert_eq!(cfg.model.seed, 5);
        assert_eq!(cfg.train.seed, 5);
        // CLI-style override wins.
        cfg.apply_kv("batch_size", "4").unwrap();
        assert_eq!(cfg.train.batch_size, 4);
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_valid_list() {
        let mut cfg = RunConfig::new(HeadKind::Gru);
        let err = cfg.apply_kv("momentum", "0.9").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("momentum"));
        assert!(msg.contains("batch_size"));
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut cfg = RunConfig::new(HeadKind::Gru);
        assert!(cfg.apply_kv("lr", "fast").is_err());
        assert!(cfg.apply_kv("batch_size", "0").is_err());
        assert!(cfg.apply_kv("pool", "3").is_err());
        assert!(cfg.apply_kv("head", "banjo").is_err());
    }

    #[test]
    fn resolved_dump_contains_every_setting() {
        let mut cfg = RunConfig::new(HeadKind::Gru);
        cfg.manifest = Some(PathBuf::from("data/manifest.csv"));
        let dump = cfg.resolved();
        assert!(dump.contains("head=gru"));
        assert!(dump.contains("batch_size=16"));
        assert!(dump.contains("lr=0.0001"));
        assert!(dump.contains("max_epochs=15"));
        assert!(dump.contains("manifest=data/manifest.csv"));
    }
}
