//! Run configuration: defaults, overlaid by a JSON file of flat dotted keys,
//! overlaid by `--set key=value` flags.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use cbert::features::BaselineConfig;
use cbert::model::{AblationMode, FeaturizerConfig};
use cbert::training::{ArchConfig, CvOptions, MlmConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub lr: Vec<f64>,
    pub batch_size: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lr: vec![1e-3],
            batch_size: vec![16],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub remove_stopwords: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub mode: AblationMode,
    /// Run MLM pre-training of the code encoder before each fine-tuning run.
    pub pretrain: bool,
    pub arch: ArchConfig,
    pub featurizer: FeaturizerConfig,
    pub train: TrainConfig,
    pub grid: GridConfig,
    pub mlm: MlmConfig,
    pub baseline: BaselineConfig,
    pub preprocess: PreprocessOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            num_classes: 3,
            mode: AblationMode::Full,
            pretrain: false,
            arch: ArchConfig::default(),
            featurizer: FeaturizerConfig::default(),
            train: TrainConfig::default(),
            grid: GridConfig::default(),
            mlm: MlmConfig::default(),
            baseline: BaselineConfig::default(),
            preprocess: PreprocessOptions::default(),
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| anyhow!("config key {key:?}: {:?} is not a section", parts[..i].join(".")))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| anyhow!("unknown config key {key:?}"))?;
        if i + 1 == parts.len() {
            if slot.is_object() {
                bail!("config key {key:?} names a section, not a value");
            }
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split yields at least one part")
}

/// Parses a flag value: JSON when it parses, a plain string otherwise.
fn flag_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let flat: serde_json::Map<String, Value> = serde_json::from_str(&text)
                .with_context(|| format!("config {} must be a JSON object of dotted keys", path.display()))?;
            for (k, v) in flat {
                set_path(&mut tree, &k, v).with_context(|| format!("in {}", path.display()))?;
            }
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects key=value, got {s:?}"))?;
            set_path(&mut tree, k.trim(), flag_value(v.trim()))?;
        }
        let cfg: RunConfig = serde_json::from_value(tree).context("invalid configuration value")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            bail!("num_classes must be at least 2");
        }
        if self.grid.lr.is_empty() || self.grid.batch_size.is_empty() {
            bail!("grid.lr and grid.batch_size must be non-empty");
        }
        self.train.validate()?;
        for c in self.grid_configs() {
            c.validate()?;
        }
        if self.pretrain {
            self.mlm.validate()?;
        }
        if self.featurizer.code_max_len < 4 || self.featurizer.text_max_len < 4 {
            bail!("featurizer max lengths must be at least 4");
        }
        if self.arch.heads == 0 || !self.arch.d_model.is_multiple_of(self.arch.heads) {
            bail!("arch.d_model must be divisible by arch.heads");
        }
        Ok(())
    }

    /// Cartesian product of the grid axes over the base train config.
    pub fn grid_configs(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &lr in &self.grid.lr {
            for &batch_size in &self.grid.batch_size {
                out.push(TrainConfig {
                    lr,
                    batch_size,
                    seed: self.seed,
                    mode: self.mode,
                    ..self.train.clone()
                });
            }
        }
        out
    }

    pub fn cv_options(&self) -> CvOptions {
        CvOptions {
            arch: self.arch.clone(),
            featurizer: self.featurizer.clone(),
            mlm: self.pretrain.then(|| MlmConfig {
                seed: self.seed,
                ..self.mlm.clone()
            }),
        }
    }
}
