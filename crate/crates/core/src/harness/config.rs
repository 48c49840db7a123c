//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{load_bundle, DatasetBundle};
use crate::exec::Exec;
use crate::nn::ArchitectureConfig;
use crate::objective::LossWeights;
use crate::synthgen::{generate_synthetic1, generate_synthetic2, Synth1Config, Synth2Config};
use crate::{Error, Result};

use super::train::TrainConfig;

/// Where the data of an experiment comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic1(Synth1Config),
    Synthetic2(Synth2Config),
    /// A bundle directory previously written by `save_bundle`.
    Bundle { path: PathBuf },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic1(Synth1Config::default())
    }
}

impl DatasetConfig {
    pub fn name(&self) -> String {
        match self {
            DatasetConfig::Synthetic1(_) => "synthetic1".into(),
            DatasetConfig::Synthetic2(_) => "synthetic2".into(),
            DatasetConfig::Bundle { path } => {
                path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "bundle".into())
            }
        }
    }

    /// Generates or loads the dataset. Every method of an experiment sees these exact bytes.
    pub fn materialize(&self, exec: Exec) -> Result<DatasetBundle> {
        match self {
            DatasetConfig::Synthetic1(c) => generate_synthetic1(c, exec),
            DatasetConfig::Synthetic2(c) => generate_synthetic2(c, exec),
            DatasetConfig::Bundle { path } => load_bundle(path),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            DatasetConfig::Synthetic1(c) => c.seed = seed,
            DatasetConfig::Synthetic2(c) => c.seed = seed,
            DatasetConfig::Bundle { .. } => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write abundance maps and endmember plots.
    pub figures: bool,
    /// Write a checkpoint for every trained model.
    pub checkpoints: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs"), figures: true, checkpoints: true }
    }
}

/// Top-level experiment file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub arch: ArchitectureConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub output: OutputConfig,
    /// Training seeds; empty means just `train.seed`.
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::Synthetic1(c) => c.validate()?,
            DatasetConfig::Synthetic2(c) => c.validate()?,
            DatasetConfig::Bundle { .. } => {}
        }
        self.train.validate()?;
        self.loss.validate()?;
        if self.arch.endmembers != 0 {
            self.arch.validate()?;
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// Restricts the experiment to a single training seed. The dataset seed is left alone.
    pub fn override_seed(&mut self, seed: u64) {
        self.seeds = vec![seed];
        self.train.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.seeds(), vec![0]);
        assert_eq!(cfg.train.epochs, 1000);
    }

    #[test]
    fn sections_parse() {
        let text = r#"{
            "dataset": {"kind": "synthetic2", "phases": 3, "seed": 4},
            "arch": {"embed_dim": 16, "heads": 2},
            "train": {"epochs": 5, "use_cem": false, "cem_mode": "a1_plus_a2"},
            "loss": {"beta": 1.0, "gamma": 0.2, "lambda": 0.0},
            "output": {"dir": "out", "figures": false},
            "seeds": [1, 2]
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        match &cfg.dataset {
            DatasetConfig::Synthetic2(c) => assert_eq!((c.phases, c.seed, c.bands), (3, 4, 198)),
            other => panic!("wrong dataset {other:?}"),
        }
        assert_eq!(cfg.arch.embed_dim, 16);
        assert!(!cfg.train.use_cem);
        assert_eq!(cfg.loss.gamma, 0.2);
        assert_eq!(cfg.seeds(), vec![1, 2]);
        assert_eq!(cfg.dataset.name(), "synthetic2");
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            r#"{"train": {"epochs": 0}}"#,
            r#"{"loss": {"beta": -1}}"#,
            r#"{"arch": {"embed_dim": 10, "heads": 3, "endmembers": 2}}"#,
            r#"{"bogus": 1}"#,
            r#"{"dataset": {"kind": "synthetic9"}}"#,
            r#"{"dataset": {"kind": "synthetic1", "hieght": 20}}"#,
        ] {
            let err = ExperimentConfig::from_json(text).unwrap_err();
            assert!(err.is_validation(), "{text}: {err}");
        }
    }

    #[test]
    fn seed_override_keeps_dataset_bytes() {
        let mut cfg = ExperimentConfig::default();
        cfg.override_seed(9);
        assert_eq!((cfg.seeds(), cfg.train.seed), (vec![9], 9));
        assert_eq!(cfg.dataset, DatasetConfig::default());
    }
}
