//! Run configuration: a single JSON document, strictly validated.
//!
//! Unknown keys are rejected at every level. The defaults mirror the
//! published recipe where one exists (balance coefficients 2/2/1,
//! distilled layers 2 and 3, 24 regions with M = 2, learning rate 0.001,
//! batch size 2) and desk-scale stand-ins elsewhere (16 feature channels,
//! 3 layers, 64 synthetic scenes, 10 epochs).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compress::ZCompressMode;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::loss::LossWeights;
use crate::store::OptimizerKind;
use crate::synth::{default_classes, SynthClassSpec};

/// Number of encoder layers in both toy networks.
pub const NUM_LAYERS: usize = 3;

/// Label-weight distillation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LwdConfig {
    pub enabled: bool,
    pub k_rho: usize,
    pub k_theta: usize,
    pub m: usize,
    /// Region-sampling seed; derived from the run seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for LwdConfig {
    fn default() -> Self {
        // 24 regions, two sampled per scan
        LwdConfig {
            enabled: true,
            k_rho: 4,
            k_theta: 6,
            m: 2,
            seed: None,
        }
    }
}

/// Ablation switches of the distillation path. Label-weight distillation
/// toggles through `lwd.enabled`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub logit_kd: bool,
    pub vpd: bool,
    pub compression_mode: ZCompressMode,
    pub domain_transfer: bool,
    pub cross_attention: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            logit_kd: true,
            vpd: true,
            compression_mode: ZCompressMode::ZConv,
            domain_transfer: true,
            cross_attention: true,
        }
    }
}

/// Where scans come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Generated labeled scenes; validation scenes use derived seeds.
    Synthetic {
        scenes: usize,
        #[serde(default = "default_val_scenes")]
        val_scenes: usize,
        #[serde(default)]
        classes: Option<Vec<SynthClassSpec>>,
    },
    /// SemanticKITTI-format files plus a remap table.
    Files {
        scans: Vec<PathBuf>,
        labels: Vec<PathBuf>,
        remap: PathBuf,
    },
}

fn default_val_scenes() -> usize {
    8
}

/// Full experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub grid: GridSpec,
    pub c_v: usize,
    pub c_b: usize,
    /// Distilled layer subset (1-based encoder layer indices).
    pub vpd_layers: Vec<usize>,
    pub lwd: LwdConfig,
    pub loss_weights: LossWeights,
    pub temperature: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub dataset: DatasetConfig,
    pub ablation: AblationConfig,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            grid: GridSpec::desk_default(),
            c_v: 16,
            c_b: 16,
            vpd_layers: vec![2, 3],
            lwd: LwdConfig::default(),
            loss_weights: LossWeights::default(),
            temperature: 2.0,
            learning_rate: 0.001,
            batch_size: 2,
            epochs: 10,
            seed: 7,
            optimizer: OptimizerKind::Sgd,
            dataset: DatasetConfig::Synthetic {
                scenes: 64,
                val_scenes: 8,
                classes: None,
            },
            ablation: AblationConfig::default(),
            class_names: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.loss_weights.validate()?;
        if self.c_v < 1 || self.c_b < 1 {
            return Err(Error::Config("feature widths must be >= 1".into()));
        }
        if self.ablation.vpd {
            if self.vpd_layers.is_empty() {
                return Err(Error::Config(
                    "vpd is enabled but vpd_layers is empty".into(),
                ));
            }
            let mut sorted = self.vpd_layers.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.vpd_layers.len() {
                return Err(Error::Config("vpd_layers contains duplicates".into()));
            }
            for &l in &self.vpd_layers {
                if l < 1 || l > NUM_LAYERS {
                    return Err(Error::Config(format!(
                        "vpd layer {l} outside 1..={NUM_LAYERS}"
                    )));
                }
            }
        }
        if self.ablation.compression_mode == ZCompressMode::ScatterMax && self.c_v != self.c_b
        {
            return Err(Error::Config(
                "scatter_max compression requires c_v == c_b".into(),
            ));
        }
        if self.lwd.enabled {
            if self.lwd.m < 1 || self.lwd.m > self.lwd.k_rho * self.lwd.k_theta {
                return Err(Error::Config(format!(
                    "lwd.m = {} outside 1..={}",
                    self.lwd.m,
                    self.lwd.k_rho * self.lwd.k_theta
                )));
            }
            crate::lwd::RegionPartition::new(self.lwd.k_rho, self.lwd.k_theta, &self.grid)?;
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        match &self.dataset {
            DatasetConfig::Synthetic { scenes, classes, .. } => {
                if *scenes < 1 {
                    return Err(Error::Config("synthetic dataset needs >= 1 scene".into()));
                }
                let n = classes.as_ref().map_or(default_classes().len(), Vec::len);
                if n < 2 {
                    return Err(Error::Config("need at least two classes".into()));
                }
            }
            DatasetConfig::Files {
                scans,
                labels,
                remap: _,
            } => {
                if scans.is_empty() || scans.len() != labels.len() {
                    return Err(Error::Config(format!(
                        "files dataset: {} scans but {} label files",
                        scans.len(),
                        labels.len()
                    )));
                }
            }
        }
        if let Some(names) = &self.class_names {
            let c = self.synthetic_class_count();
            if let Some(c) = c {
                if names.len() != c {
                    return Err(Error::Config(format!(
                        "class_names has {} entries for {} classes",
                        names.len(),
                        c
                    )));
                }
            }
        }
        Ok(())
    }

    fn synthetic_class_count(&self) -> Option<usize> {
        match &self.dataset {
            DatasetConfig::Synthetic { classes, .. } => {
                Some(classes.as_ref().map_or(default_classes().len(), Vec::len))
            }
            DatasetConfig::Files { .. } => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let config = TrainConfig::default();
        config.validate().unwrap();
        let text = serde_json::to_string_pretty(&config).unwrap();
        let back = TrainConfig::from_json(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut value = serde_json::to_value(TrainConfig::default()).unwrap();
        value["mystery_knob"] = serde_json::json!(3);
        let text = serde_json::to_string(&value).unwrap();
        let err = TrainConfig::from_json(&text).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn vpd_enabled_requires_layers() {
        let mut config = TrainConfig::default();
        config.vpd_layers.clear();
        assert!(config.validate().is_err());
        config.ablation.vpd = false;
        config.validate().unwrap();
    }

    #[test]
    fn scatter_max_requires_equal_widths() {
        let mut config = TrainConfig::default();
        config.ablation.compression_mode = ZCompressMode::ScatterMax;
        config.validate().unwrap();
        config.c_b = 8;
        assert!(config.validate().is_err());
    }

    #[test]
    fn lwd_m_bounds() {
        let mut config = TrainConfig::default();
        config.lwd.m = 25;
        assert!(config.validate().is_err());
        config.lwd.m = 0;
        assert!(config.validate().is_err());
        config.lwd.enabled = false;
        config.validate().unwrap();
    }

    #[test]
    fn files_dataset_checks_pairing() {
        let mut config = TrainConfig::default();
        config.dataset = DatasetConfig::Files {
            scans: vec!["a.bin".into()],
            labels: vec![],
            remap: "remap.json".into(),
        };
        assert!(config.validate().is_err());
    }
}
