//! Pipeline configuration, read from TOML. Every key is optional; missing
//! keys take the defaults below.

use std::path::{Path, PathBuf};

use brainex_core::bayesnet::{NetworkConfig, TrainConfig};
use brainex_core::densecrf::{CrfParams, FilterKind};
use brainex_core::phantom::{PhantomConfig, SubjectVariation};
use brainex_core::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Master seed; all stage seeds derive from it.
    pub seed: u64,
    pub mc_samples: usize,
    pub axis: Axis,
    pub folds: usize,
    /// Network input `[height, width]`; default is the native slice size
    /// rounded up to a multiple of `2^depth`.
    pub input_size: Option<[usize; 2]>,
    pub filter: FilterKind,
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub crf: CrfParams,
    pub phantom: PhantomConfig,
    pub variation: SubjectVariation,
    pub experiment: ExperimentConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            seed: 0,
            mc_samples: 6,
            axis: Axis::Z,
            folds: 2,
            input_size: None,
            filter: FilterKind::Fast,
            net: NetworkConfig::default(),
            train: TrainConfig { iterations: 1500, ..TrainConfig::default() },
            crf: CrfParams::default(),
            phantom: PhantomConfig::default(),
            variation: SubjectVariation::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineConfig::from_toml(&text).map_err(|e| e.in_file(path))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.crf.validate()?;
        self.phantom.validate()?;
        self.experiment.validate()?;
        if self.mc_samples == 0 {
            return Err(Error::Invalid("mc_samples must be at least 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Invalid(format!("folds must be at least 2, got {}", self.folds)));
        }
        if let Some([h, w]) = self.input_size {
            let m = self.net.size_multiple();
            if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
                return Err(Error::Invalid(format!("input_size {h}x{w} is not a positive multiple of {m}")));
            }
        }
        Ok(())
    }

    pub fn input_size(&self) -> Option<(usize, usize)> {
        self.input_size.map(|[h, w]| (h, w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = PipelineConfig::from_toml("seed = 7\n[crf]\nw1 = 5.0\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.crf.w1, 5.0);
        assert_eq!(cfg.crf.w2, 1.0);
        assert_eq!(cfg.mc_samples, 6);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(PipelineConfig::from_toml("folds = 1").is_err());
        assert!(PipelineConfig::from_toml("unknown_key = 1").is_err());
        assert!(PipelineConfig::from_toml("[net]\ndropout = 1.5").is_err());
    }
}
