//! Run configuration: a flat JSON document covering dataset, model,
//! optimizer, estimator, and output settings. Unknown keys are rejected.

use anyhow::{Context, Result};
use denseflow::activations::ActivationSpec;
use denseflow::flow::{ArchKind, ConcatSpec, ModelConfig};
use denseflow::likelihood::Estimator;
use denseflow::toydata::ToyDatasetKind;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// two_moons | two_circles | checkerboard
    pub dataset: String,
    /// dense | residual
    pub arch: String,
    pub d: usize,
    pub blocks: usize,
    pub depth: usize,
    pub growth: usize,
    /// identity | sigmoid | relu | crelu | lipswish | leakylswish | clipswish
    pub activation: String,
    /// learnable | fixed
    pub concat: String,
    pub coeff: f64,
    /// First iteration at which the concatenation weights start learning;
    /// their gradients are dropped before this point.
    pub lc_start_iter: u64,
    pub lr: f64,
    pub iterations: u64,
    pub batch: usize,
    /// exact | truncated | roulette
    pub estimator: String,
    pub n_terms: usize,
    pub n_probes: usize,
    pub geom_p: f64,
    /// Exactly computed leading terms before the roulette tail.
    pub leading_exact: usize,
    pub seed: u64,
    pub out_dir: String,
    pub eval_samples: usize,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: "two_moons".into(),
            arch: "dense".into(),
            d: 2,
            blocks: 10,
            depth: 3,
            growth: 32,
            activation: "clipswish".into(),
            concat: "learnable".into(),
            coeff: 0.98,
            lc_start_iter: 0,
            lr: 0.001,
            iterations: 50_000,
            batch: 500,
            estimator: "exact".into(),
            n_terms: 10,
            n_probes: 1,
            geom_p: 0.5,
            leading_exact: 20,
            seed: 0,
            out_dir: "runs/out".into(),
            eval_samples: 10_000,
            checkpoint_every: 5_000,
            log_every: 100,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn dataset_kind(&self) -> Result<ToyDatasetKind> {
        Ok(ToyDatasetKind::parse(&self.dataset)?)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let config = ModelConfig {
            d: self.d,
            blocks: self.blocks,
            depth: self.depth,
            growth: self.growth,
            activation: ActivationSpec::parse(&self.activation)?,
            concat: ConcatSpec::parse(&self.concat)?,
            coeff: self.coeff,
            arch: ArchKind::parse(&self.arch)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn estimator(&self) -> Result<Estimator> {
        parse_estimator(
            &self.estimator,
            self.n_terms,
            self.n_probes,
            self.geom_p,
            self.leading_exact,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_kind()?;
        self.model_config()?;
        let est = self.estimator()?;
        est.validate(self.d).map_err(anyhow::Error::from)?;
        anyhow::ensure!(self.batch >= 1, "batch size must be at least 1");
        anyhow::ensure!(self.lr > 0.0, "learning rate must be positive");
        anyhow::ensure!(self.log_every >= 1, "log_every must be at least 1");
        anyhow::ensure!(self.checkpoint_every >= 1, "checkpoint_every must be at least 1");
        Ok(())
    }
}

pub fn parse_estimator(
    name: &str,
    n_terms: usize,
    n_probes: usize,
    geom_p: f64,
    leading_exact: usize,
) -> Result<Estimator> {
    match name.to_ascii_lowercase().as_str() {
        "exact" => Ok(Estimator::Exact),
        "truncated" => Ok(Estimator::Truncated { n_terms, n_probes }),
        "roulette" => Ok(Estimator::Roulette {
            geom_p,
            n_probes,
            leading_exact,
        }),
        other => anyhow::bail!("unknown estimator '{other}'"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let config = RunConfig::default();
        config.validate().unwrap();
        let json = serde_json::to_string(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"dataset":"two_moons","bogus_key":1}"#);
        assert!(err.is_err());
    }

    #[test]
    fn partial_configs_fill_with_defaults() {
        let config = RunConfig::from_json(r#"{"dataset":"checkerboard","iterations":5}"#).unwrap();
        assert_eq!(config.dataset, "checkerboard");
        assert_eq!(config.iterations, 5);
        assert_eq!(config.blocks, 10);
    }

    #[test]
    fn file_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let mut config = RunConfig::default();
        config.seed = 1234;
        config.estimator = "roulette".into();
        config.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn bad_estimator_name_rejected() {
        let mut config = RunConfig::default();
        config.estimator = "magic".into();
        assert!(config.validate().is_err());
    }
}
