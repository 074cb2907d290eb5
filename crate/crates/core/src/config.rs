//! Run configuration with JSON overlay on top of full defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{BaselineConfig, BaselineMethod};
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::nn::{ArShape, LrSchedule, TrainConfig};
use crate::tabular::{Binning, TableOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub numeric_columns: Vec<String>,
    pub label_column: String,
    pub bin_count: usize,
    pub binning: Binning,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            numeric_columns: vec![],
            label_column: "label".into(),
            bin_count: 20,
            binning: Binning::EqualFrequency,
        }
    }
}

impl DataConfig {
    pub fn table_options(&self) -> TableOptions {
        TableOptions {
            numeric_columns: self.numeric_columns.clone(),
            label_column: self.label_column.clone(),
            bin_count: self.bin_count,
            binning: self.binning,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub train: TrainConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            train: TrainConfig {
                epochs: 20,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub train: TrainConfig,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            layers: 1,
            heads: 2,
            train: TrainConfig {
                epochs: 15,
                ..Default::default()
            },
        }
    }
}

impl OracleConfig {
    pub fn shape(&self) -> ArShape {
        ArShape {
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub hidden: usize,
    pub latent: usize,
    pub train: TrainConfig,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            latent: 8,
            train: TrainConfig {
                epochs: 30,
                lr: LrSchedule::constant(0.01),
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineDefaults {
    pub wachter: BaselineConfig,
    pub dice: BaselineConfig,
    pub dice_vae: BaselineConfig,
}

impl Default for BaselineDefaults {
    fn default() -> Self {
        Self {
            wachter: BaselineConfig::for_method(BaselineMethod::Wachter),
            dice: BaselineConfig::for_method(BaselineMethod::Dice),
            dice_vae: BaselineConfig::for_method(BaselineMethod::DiceVae),
        }
    }
}

impl BaselineDefaults {
    pub fn get(&self, method: BaselineMethod) -> &BaselineConfig {
        match method {
            BaselineMethod::Wachter => &self.wachter,
            BaselineMethod::Dice => &self.dice,
            BaselineMethod::DiceVae => &self.dice_vae,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Number of inputs each grid cell averages over.
    pub inputs: usize,
    pub taus: Vec<usize>,
    pub counts: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            inputs: 20,
            taus: vec![25, 50, 100],
            counts: vec![2, 4, 8],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub classifier: ClassifierConfig,
    pub plausibility: OracleConfig,
    pub vae: VaeConfig,
    pub guidance: GuidanceConfig,
    pub baselines: BaselineDefaults,
    pub ablation: AblationConfig,
    pub seed: u64,
}

impl RunConfig {
    /// Larger preset with the published training schedule.
    pub fn published_preset() -> Self {
        let mut cfg = Self::default();
        cfg.diffusion.steps = 2000;
        cfg.diffusion.train = TrainConfig {
            epochs: 500,
            batch_size: 120,
            lr: LrSchedule {
                base: 1e-4,
                warmup_steps: 30_000,
                half_life_steps: Some(25_000),
            },
            momentum: 0.0,
            grad_clip: Some(0.05),
            seed: 0,
        };
        cfg.classifier.hidden = 768;
        cfg.plausibility.train.batch_size = 120;
        cfg.plausibility.train.epochs = 500;
        cfg.ablation.taus = vec![500, 1000, 2000];
        cfg
    }

    /// Sets the run seed and derives every component seed from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.diffusion.train.seed = seed;
        self.classifier.train.seed = seed.wrapping_add(1);
        self.plausibility.train.seed = seed.wrapping_add(2);
        self.vae.train.seed = seed.wrapping_add(3);
        self.guidance.seed = seed;
        for b in [
            &mut self.baselines.wachter,
            &mut self.baselines.dice,
            &mut self.baselines.dice_vae,
        ] {
            b.seed = seed;
        }
        self
    }

    /// Applies a JSON overlay to `self`: every key present in `overlay`
    /// replaces the corresponding default, nested objects merge key by key.
    pub fn overlay(&self, overlay: Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, overlay, "")?;
        Ok(serde_json::from_value(base)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Self::default().overlay(serde_json::from_str(text)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

fn merge(base: &mut Value, overlay: Value, path: &str) -> Result<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => {
                        return Err(Error::InvalidArgument(format!(
                            "unknown configuration key `{here}`"
                        )))
                    }
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}
