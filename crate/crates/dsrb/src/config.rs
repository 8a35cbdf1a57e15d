//! Experiment configuration: a TOML document with dotted-path overrides.

use std::path::{Path, PathBuf};

use dsrb_core::backbone::{BackboneConfig, SyntheticSceneSpec};
use dsrb_core::model::ModelConfig;
use dsrb_core::train::{Schedule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "DSRB_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Rendered on the fly; train and test are disjoint index ranges of one scene spec.
    Synthetic {
        #[serde(default)]
        scene: SyntheticSceneSpec,
        train_images: usize,
        test_images: usize,
    },
    /// Directories holding `labels.csv` and the image files it names.
    Directory { train: PathBuf, test: PathBuf },
    /// COCO-style instance annotations plus image roots.
    Coco {
        train_annotations: PathBuf,
        train_images: PathBuf,
        test_annotations: PathBuf,
        test_images: PathBuf,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            scene: SyntheticSceneSpec::default(),
            train_images: 2000,
            test_images: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    /// Known-label proportions swept by `sweep` and `ablation`.
    pub proportions: Vec<f64>,
    /// One run per seed; each seed drives initialization, label dropping and batch order.
    pub seeds: Vec<u64>,
    /// Score threshold for the F1 measures.
    pub threshold: f64,
    /// Optional word-vector file for the category embeddings.
    pub embeddings: Option<PathBuf>,
    pub model: ModelConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Single-CPU scale: synthetic scenes, small backbone, 12 epochs.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            dataset: DatasetConfig::default(),
            proportions: vec![0.2],
            seeds: vec![0, 1, 2],
            threshold: dsrb_core::metrics::DEFAULT_THRESHOLD,
            embeddings: None,
            model: ModelConfig::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }

    /// The published optimizer settings and the nine-proportion sweep.
    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.name = "paper".into();
        cfg.proportions = (1..=9).map(|i| i as f64 / 10.0).collect();
        cfg.seeds = vec![0];
        cfg.train.schedule = Schedule::paper();
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key=value`, where `key` is a dotted path such as
    /// `train.schedule.epochs` and `value` is a TOML literal (bare words are
    /// taken as strings).
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = parse_literal(raw);
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{}` is not a table", parts[..i].join("."))))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            slot = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        let updated: Self = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{assignment}`: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// The output root after the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.proportions.is_empty() {
            return Err(Error::Config("at least one proportion is required".into()));
        }
        if let Some(p) = self.proportions.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::Config(format!("proportion {p} outside (0, 1]")));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.backbone.validate()?;
        self.train.validate()?;
        if let DatasetConfig::Synthetic { scene, train_images, test_images } = &self.dataset {
            if *train_images == 0 || *test_images == 0 {
                return Err(Error::Config("synthetic splits must be non-empty".into()));
            }
            if scene.categories != self.model.categories {
                return Err(Error::Config(format!(
                    "scene has {} categories but the model has {}",
                    scene.categories, self.model.categories
                )));
            }
            if (scene.height, scene.width) != (self.backbone.input_height, self.backbone.input_width) {
                return Err(Error::Config("scene size differs from the backbone input size".into()));
            }
        }
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
