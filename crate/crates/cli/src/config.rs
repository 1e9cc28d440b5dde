//! Run configuration file (TOML). Every section is optional and falls back
//! to the desk-scale defaults; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use raydepth::augment::AugmentConfig;
use raydepth::evalmetrics::EvalProtocol;
use raydepth::experiment::ToyConfig;
use raydepth::losses::LossWeights;
use raydepth::network::NetworkConfig;
use raydepth::synthdata::DatasetConfig;
use raydepth::trainer::{ScheduleConfig, TrainConfig};
use raydepth::{Error, Result};
use serde::{Deserialize, Serialize};

/// File name of the configuration echoed into every output directory.
pub const ECHO_NAME: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed for every random stream of a command.
    pub seed: u64,
    pub paths: Paths,
    /// Includes the Fourier embedding settings under `network.fourier`.
    pub network: NetworkConfig,
    pub augment: AugmentConfig,
    pub loss: LossWeights,
    pub schedule: ScheduleConfig,
    pub dataset: DatasetConfig,
    pub protocol: EvalProtocol,
    pub eval: EvalSettings,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory used when `--data` is not given.
    pub dataset: Option<PathBuf>,
    /// Output directory used when `--out` is not given.
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Latent samples decoded per image.
    pub samples: usize,
    /// Retained fractions for uncertainty curves.
    pub fractions: Vec<f64>,
    /// Relative intrinsics noise applied before prediction.
    pub intrinsics_noise: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            samples: 1,
            fractions: vec![1.0, 0.75, 0.5, 0.25],
            intrinsics_noise: 0.0,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let toy = ToyConfig::default();
        let per_family = toy.train_samples + toy.val_samples;
        Self {
            seed: 0,
            paths: Paths::default(),
            network: toy.network,
            augment: toy.train.augment,
            loss: toy.train.loss,
            schedule: toy.train.schedule,
            dataset: DatasetConfig {
                families: vec![toy.train_family, toy.test_family],
                samples_per_family: per_family,
                val_fraction: toy.val_samples as f64 / per_family as f64,
                scene: toy.scene,
            },
            protocol: toy.protocol,
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg = Self::parse(&text).map_err(|e| match e {
            Error::Parse { offset, reason, .. } => Error::Parse {
                context: path.display().to_string(),
                offset,
                reason,
            },
            other => other,
        })?;
        Ok(cfg)
    }

    /// Parses and validates a configuration document. Keys missing from a
    /// section keep the values of [`RunConfig::default`].
    pub fn parse(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            context: "config".into(),
            offset: e.span().map_or(0, |s| s.start),
            reason: e.message().to_string(),
        })?;
        let mut merged = toml::Table::try_from(Self::default()).expect("config serializes");
        merge(&mut merged, user);
        let cfg = Self::deserialize(merged).map_err(|e| config_error("config", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train().validate()?;
        self.dataset.validate()?;
        self.protocol.validate()?;
        if self.eval.samples == 0 {
            return Err(config_error("eval.samples", "must be at least 1"));
        }
        if self.eval.fractions.is_empty() || self.eval.fractions.iter().any(|&q| !(q > 0.0 && q <= 1.0)) {
            return Err(config_error("eval.fractions", "need one or more fractions in (0, 1]"));
        }
        if !(self.eval.intrinsics_noise >= 0.0 && self.eval.intrinsics_noise.is_finite()) {
            return Err(config_error("eval.intrinsics_noise", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            schedule: self.schedule.clone(),
            augment: self.augment.clone(),
            loss: self.loss,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(ECHO_NAME), self.to_toml())?;
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn config_error(key: &str, reason: &str) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn nested_sections_merge_key_by_key() {
        let cfg = RunConfig::parse("[network.fourier]\nbands = 8\n").unwrap();
        assert_eq!(cfg.network.fourier.bands, 8);
        assert_eq!(cfg.network.fourier.max_resolution, RunConfig::default().network.fourier.max_resolution);
        assert_eq!(cfg.network.latents, RunConfig::default().network.latents);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["sede = 3", "[network]\nlatent = 3"] {
            match RunConfig::parse(text) {
                Err(Error::Config { reason, .. }) => assert!(reason.contains("unknown field"), "{reason}"),
                other => panic!("expected config error, got {other:?}"),
            }
        }
        assert!(matches!(RunConfig::parse("seed = "), Err(Error::Parse { .. })));
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::parse("seed = 9\n[schedule]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.schedule.epochs, 2);
        assert_eq!(cfg.schedule.batch_size, RunConfig::default().schedule.batch_size);
    }

    #[test]
    fn invalid_family_names_its_key() {
        let text = "[dataset]\nsamples_per_family = 4\n[[dataset.families]]\nlabel = \"cam\"\nfocal = [0.0, 10.0]\nresolutions = [[32, 24]]\n";
        match RunConfig::parse(text) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "families.cam.focal"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn eval_settings_are_validated() {
        match RunConfig::parse("[eval]\nfractions = [1.5]\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "eval.fractions"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
