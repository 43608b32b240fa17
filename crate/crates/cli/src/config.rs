//! Pipeline configuration file (TOML). Every value has a default and every
//! value can be overridden by a command-line flag.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dynafuse::rankpool::{RankPoolConfig, StepRule};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub rankpool: RankPoolSection,
    pub split: SplitSection,
    pub extractor: ExtractorSection,
    pub train: TrainSection,
    pub ensemble: EnsembleSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankPoolSection {
    pub lambda: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    /// "backtracking" or "fixed"
    pub step_rule: String,
    /// Step size when `step_rule = "fixed"`.
    pub fixed_step: f64,
}

impl Default for RankPoolSection {
    fn default() -> Self {
        let d = RankPoolConfig::default();
        RankPoolSection {
            lambda: d.lambda,
            max_iters: d.max_iters,
            tolerance: d.tolerance,
            step_rule: "backtracking".to_string(),
            fixed_step: 0.1,
        }
    }
}

impl RankPoolSection {
    pub fn to_config(&self) -> anyhow::Result<RankPoolConfig> {
        let step_rule = match self.step_rule.as_str() {
            "backtracking" => StepRule::Backtracking,
            "fixed" => StepRule::Fixed(self.fixed_step),
            other => bail!("unknown step rule {other:?}; use \"backtracking\" or \"fixed\""),
        };
        Ok(RankPoolConfig {
            lambda: self.lambda,
            max_iters: self.max_iters,
            tolerance: self.tolerance,
            step_rule,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub seed: u64,
    pub train: u32,
    pub test: u32,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            seed: 0,
            train: 4,
            test: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorSection {
    pub seed: u64,
    pub channels: Vec<usize>,
    /// Square side every image is resized to before extraction.
    pub target: usize,
}

impl Default for ExtractorSection {
    fn default() -> Self {
        ExtractorSection {
            seed: 0,
            channels: vec![8, 16, 32],
            target: 832,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-4,
            batch_size: 32,
            epochs: 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    /// Per-classifier weights; empty means uniform.
    pub weights: Vec<f64>,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(PipelineConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let config: PipelineConfig = toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?;
                if let Some(manifest) = &config.paths.manifest {
                    if !manifest.exists() {
                        bail!("config manifest path {} does not exist", manifest.display());
                    }
                }
                Ok(config)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let config = PipelineConfig::default();
        let text = toml::to_string(&config).unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.train.lr, config.train.lr);
        assert_eq!(back.extractor.channels, config.extractor.channels);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<PipelineConfig>("[trian]\nlr = 0.1\n");
        assert!(err.is_err());
    }

    #[test]
    fn step_rule_parses() {
        let mut section = RankPoolSection::default();
        assert!(matches!(
            section.to_config().unwrap().step_rule,
            StepRule::Backtracking
        ));
        section.step_rule = "fixed".into();
        section.fixed_step = 0.25;
        assert!(matches!(
            section.to_config().unwrap().step_rule,
            StepRule::Fixed(s) if s == 0.25
        ));
        section.step_rule = "bogus".into();
        assert!(section.to_config().is_err());
    }
}
