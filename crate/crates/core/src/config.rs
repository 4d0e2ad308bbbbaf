//! Run configuration loaded from JSON; every field has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::TsdConfig;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_WINDOW;
use crate::style_embedding::StageOneConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainingConfig {
    pub pretrain_steps: usize,
    pub pretrain_learning_rate: f64,
    pub tsd_steps: usize,
    pub tsd_learning_rate: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { pretrain_steps: 2000, pretrain_learning_rate: 1e-3, tsd_steps: 2000, tsd_learning_rate: 1e-3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct Paths {
    pub motions: Vec<PathBuf>,
    pub embeddings: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub alpha: f64,
    pub eval_window: usize,
    pub stage1: StageOneConfig,
    pub tsd: TsdConfig,
    pub training: TrainingConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            alpha: 1.0,
            eval_window: DEFAULT_WINDOW,
            stage1: StageOneConfig::default(),
            tsd: TsdConfig::default(),
            training: TrainingConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Parse a config file; unreadable or malformed files are configuration errors.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Derive every component seed from the run seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.stage1.seed = seed;
        self.tsd.seed = seed.wrapping_add(1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.eval_window == 0 {
            return Err(Error::Config("eval_window must be positive".into()));
        }
        for (name, lr) in
            [("pretrain", self.training.pretrain_learning_rate), ("tsd", self.training.tsd_learning_rate)]
        {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} learning rate must be positive, got {lr}")));
            }
        }
        self.stage1.validate()?;
        self.tsd.validate()
    }

    /// Every configured input path must exist.
    pub fn check_inputs(&self) -> Result<()> {
        let inputs = self.paths.motions.iter().chain(&self.paths.embeddings);
        for p in inputs.chain(self.paths.checkpoint.as_ref()) {
            if !p.exists() {
                return Err(Error::Config(format!("configured path {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 4, "stage1": {"channels": 32}, "tsd": {"steps": 10}}"#).unwrap();
        assert_eq!((cfg.seed, cfg.stage1.channels, cfg.stage1.heads, cfg.tsd.steps), (4, 32, 4, 10));
        assert_eq!(cfg.tsd.window, 8);
        cfg.validate().unwrap();
        let seeded = cfg.with_seed(9);
        assert_eq!((seeded.stage1.seed, seeded.tsd.seed), (9, 10));
    }

    #[test]
    fn bad_values_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"alpha": 2.0}"#).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config(_))));
        std::fs::write(&p, "{ nope").unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(dir.path().join("missing.json")), Err(Error::Config(_))));
        let cfg = RunConfig { paths: Paths { motions: vec![dir.path().join("x.bvh")], ..Default::default() }, ..Default::default() };
        assert!(cfg.check_inputs().is_err());
    }
}
