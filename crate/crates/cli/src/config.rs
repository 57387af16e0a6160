//! Run configuration: one TOML file covering every command, plus the
//! resolved copy written next to each command's outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use jointdiff::joint::TrainConfig;
use jointdiff::sampler::SamplerConfig;
use jointdiff::synthdata::{GeneratorConfig, DEFAULT_SPLIT};
use jointdiff::{Error, Result};

pub const ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub subjects: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub split_seed: u64,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        let (a, b, c) = DEFAULT_SPLIT;
        Self {
            subjects: 2000,
            split: [a, b, c],
            split_seed: 0,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate at most this many test subjects (0 = all).
    pub limit: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { limit: 0, seed: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {}", e.message())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: impl AsRef<Path>) -> Result<()> {
        std::fs::write(dir.as_ref().join(ECHO_FILE), self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.generator.validate()?;
        self.train.validate()?;
        if self.data.subjects == 0 {
            return Err(Error::InvalidArgument("data.subjects must be positive".into()));
        }
        if self.data.generator.image_side != self.train.denoiser.image_side
            || self.data.generator.age_range != self.train.age_range
        {
            return Err(Error::InvalidArgument(
                "generator and training disagree on image side or age range".into(),
            ));
        }
        let s = &self.sampler;
        if s.inference_samples == 0 || s.batch_size == 0 {
            return Err(Error::InvalidArgument("sampler counts must be positive".into()));
        }
        if s.resample_loops != 1 {
            return Err(Error::InvalidArgument("sampler.resample_loops must be 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        assert!(text.contains("continuous_steps = 50"));
        assert!(text.contains("discrete_steps = 20"));
        assert!(text.contains("inference_samples = 3"));
        assert!(text.contains("steps = 1000"));
    }

    #[test]
    fn partial_and_unknown_keys() {
        let c = RunConfig::from_toml("[train]\nepochs = 3\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 32);
        assert!(RunConfig::from_toml("[train]\nepoch = 3\n").is_err());
        assert!(RunConfig::from_toml("[bogus]\n").is_err());
    }
}
