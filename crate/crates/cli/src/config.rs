//! Run configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use so3flow_core::distributions::TargetConfig;
use so3flow_core::model::ModelConfig;
use so3flow_core::training::TrainConfig;

use crate::CliError;

/// Environment variable that overrides `out_dir`.
pub const OUT_DIR_ENV: &str = "SO3FLOW_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Points used for quadrature (entropy, normalization audit).
    #[serde(default = "default_eval_points")]
    pub eval_points: usize,
    /// Points used to bound the target density when sampling training data.
    #[serde(default = "default_sample_points")]
    pub sample_points: usize,
}

fn default_eval_points() -> usize {
    500_000
}

fn default_sample_points() -> usize {
    100_000
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            eval_points: default_eval_points(),
            sample_points: default_sample_points(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub target: TargetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Seeds model initialization, data generation and minibatching.
    #[serde(default)]
    pub seed: u64,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses and validates; errors name the offending line and column.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            CliError::Usage(format!(
                "{origin}:{}:{}: {}",
                e.line(),
                e.column(),
                strip_position(&e.to_string())
            ))
        })?;
        cfg.validate().map_err(|m| CliError::Usage(format!("{origin}: {m}")))?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        self.target.build().map_err(|e| e.to_string())?;
        if self.model.cond_dim > 0 {
            return Err("synthetic targets are unconditional; set model.cond_dim to 0".into());
        }
        if self.grid.eval_points < 1000 || self.grid.sample_points < 1000 {
            return Err("grid sizes must be at least 1000".into());
        }
        Ok(())
    }

    /// Applies command-line and environment overrides. The run seed also
    /// becomes the training seed.
    pub fn resolve(mut self, out: Option<PathBuf>, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        if let Some(o) = out.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from)) {
            self.out_dir = o;
        }
        self
    }

    /// Short SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// serde_json appends " at line L column C"; the prefix already has it.
fn strip_position(msg: &str) -> &str {
    msg.rfind(" at line ").map_or(msg, |i| &msg[..i])
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"target": {"kind": "cube24", "kappa": 40.0}}"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::parse(MINIMAL, "t").unwrap();
        assert_eq!(c.model, ModelConfig::desk());
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.grid.eval_points, 500_000);
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = "{\n  \"target\": {\"kind\": \"peak\", \"kappa\": 1.0},\n  \"bogus\": 1\n}";
        match RunConfig::parse(text, "cfg.json") {
            Err(CliError::Usage(m)) => {
                assert!(m.starts_with("cfg.json:3:"), "{m}");
                assert!(m.contains("bogus"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nested_unknown_key_and_bad_values() {
        let nested = r#"{"target": {"kind": "peak", "kappa": 1.0}, "train": {"lr": 1e-3, "momentum": 0.9}}"#;
        assert!(RunConfig::parse(nested, "t").is_err());
        let bad = r#"{"target": {"kind": "peak", "kappa": -1.0}}"#;
        assert!(RunConfig::parse(bad, "t").is_err());
        let bad = r#"{"target": {"kind": "peak", "kappa": 1.0}, "train": {"lr": 0.0}}"#;
        assert!(RunConfig::parse(bad, "t").is_err());
    }

    #[test]
    fn overrides_and_hash() {
        let c = RunConfig::parse(MINIMAL, "t").unwrap();
        let a = c.clone().resolve(Some("x".into()), Some(7));
        assert_eq!((a.seed, a.train.seed), (7, 7));
        assert_eq!(a.out_dir, PathBuf::from("x"));
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), c.resolve(Some("x".into()), Some(8)).hash());
        assert_eq!(a.hash().len(), 16);
    }
}
