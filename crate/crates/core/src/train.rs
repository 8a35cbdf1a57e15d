//! Epoch loop: schedule, augmentation, prototype refresh and optimizer steps.

use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Image};
use crate::csrl::{GlobalFeatureMap, PairPolicy};
use crate::error::{check_len, Error, Result};
use crate::heads::LossConfig;
use crate::labelspace::LabelMatrix;
use crate::model::{Gradients, Model, StepOptions};
use crate::optim::{Adam, AdamConfig};
use crate::pprb::{PrototypeAccumulator, PrototypeBank};
use crate::rng::{stream, Stream};

/// Module switches; the four presets are the ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub instance: bool,
    pub prototype: bool,
    pub contrastive: bool,
    pub vector_space: bool,
}

impl Toggles {
    pub const fn baseline() -> Self {
        Self {
            instance: false,
            prototype: false,
            contrastive: false,
            vector_space: false,
        }
    }

    pub const fn instance_only() -> Self {
        Self {
            instance: true,
            contrastive: true,
            ..Self::baseline()
        }
    }

    pub const fn prototype_only() -> Self {
        Self {
            prototype: true,
            contrastive: true,
            ..Self::baseline()
        }
    }

    pub const fn full() -> Self {
        Self {
            instance: true,
            prototype: true,
            contrastive: true,
            vector_space: false,
        }
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs between step-size decays.
    pub decay_every: u32,
    pub decay_factor: f64,
}

impl Schedule {
    pub const fn desk() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            learning_rate: 1e-3,
            decay_every: 10,
            decay_factor: 0.1,
        }
    }

    pub const fn paper() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-5,
            decay_every: 10,
            decay_factor: 0.1,
        }
    }

    /// Step size used during 1-based `epoch`.
    pub fn learning_rate_at(&self, epoch: u32) -> f64 {
        let decays = epoch.saturating_sub(1).checked_div(self.decay_every).unwrap_or(0);
        self.learning_rate * libm::pow(self.decay_factor, decays as f64)
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub toggles: Toggles,
    /// Spatial bin exponent: `4^k` bins per category.
    pub prototype_k: u32,
    pub flip: bool,
    pub pair_policy: PairPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::desk(),
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            toggles: Toggles::full(),
            prototype_k: 1,
            flip: true,
            pair_policy: PairPolicy::Literal,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.schedule.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.schedule.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.prototype_k > crate::pprb::MAX_BIN_EXPONENT {
            return Err(Error::InvalidConfig(alloc::format!(
                "prototype bin exponent {} exceeds {}",
                self.prototype_k,
                crate::pprb::MAX_BIN_EXPONENT
            )));
        }
        Ok(())
    }

    /// Whether blended paths enter the loss during 1-based `epoch`.
    pub fn blends_at(&self, epoch: u32) -> bool {
        epoch >= self.loss.blend_start_epoch
    }

    /// Whether the prototype bank is rebuilt at the start of `epoch`.
    pub fn refreshes_at(&self, epoch: u32) -> bool {
        self.toggles.prototype
            && self.blends_at(epoch)
            && (epoch - self.loss.blend_start_epoch) % self.loss.prototype_refresh_period == 0
    }
}

/// Outputs of the frozen backbone stages for every training image, plain and
/// mirrored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCache {
    pub plain: Vec<GlobalFeatureMap>,
    pub flipped: Option<Vec<GlobalFeatureMap>>,
}

impl FeatureCache {
    pub fn build(backbone: &Backbone, images: &[Image], flip: bool) -> Result<Self> {
        let plain = images.iter().map(|im| backbone.extract_frozen(im)).collect::<Result<Vec<_>>>()?;
        let flipped = if flip {
            Some(
                images
                    .iter()
                    .map(|im| backbone.extract_frozen(&im.flipped_horizontal()))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self { plain, flipped })
    }

    pub fn len(&self) -> usize {
        self.plain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plain.is_empty()
    }
}

/// One optimizer step of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: u32,
    pub iteration: u64,
    pub cls: f64,
    pub cst: f64,
    pub total: f64,
    pub mean_alpha: f64,
    pub mean_beta: f64,
    pub clean: f64,
    pub instance: f64,
    pub prototype: f64,
}

/// Everything needed to continue a run: parameters, optimizer moments,
/// prototype bank, progress counters and RNG states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: u32,
    pub iteration: u64,
    pub bank: Option<PrototypeBank>,
    pub bank_epochs: Vec<u32>,
    order_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
    prototype_rng: ChaCha8Rng,
}

impl Trainer {
    /// `seed` drives batch order, augmentation and prototype draws.
    pub fn new(model: Model, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model,
            optimizer: Adam::new(cfg.adam),
            epoch: 0,
            iteration: 0,
            bank: None,
            bank_epochs: Vec::new(),
            order_rng: stream(seed, Stream::Pairing),
            augment_rng: stream(seed, Stream::Augment),
            prototype_rng: stream(seed, Stream::Prototype),
        })
    }

    pub fn is_finished(&self, cfg: &TrainConfig) -> bool {
        self.epoch >= cfg.schedule.epochs
    }

    /// No-gradient pass over the plain training features.
    pub fn build_bank(&self, cfg: &TrainConfig, cache: &FeatureCache, labels: &LabelMatrix, epoch: u32) -> Result<PrototypeBank> {
        let q = self.model.queries()?;
        let (d, h, w) = (self.model.decoupler.feature_dim, self.model.decoupler.height, self.model.decoupler.width);
        let mut acc = PrototypeAccumulator::new(self.model.categories(), cfg.prototype_k, d, h, w)?;
        for (n, f) in cache.plain.iter().enumerate() {
            let row = labels.row(n);
            if row.iter().any(|&y| y == 1.0) {
                acc.add_image(&self.model.category_maps(f, &q)?, row);
            }
        }
        let bank = acc.finish(epoch);
        if !bank.has_usable_category() {
            return Err(Error::NoPrototypes);
        }
        Ok(bank)
    }

    /// Trains the next epoch and returns its trace rows.
    pub fn run_epoch(&mut self, cfg: &TrainConfig, cache: &FeatureCache, labels: &LabelMatrix) -> Result<Vec<TraceRow>> {
        check_len("training labels", cache.len(), labels.rows())?;
        if cache.is_empty() {
            return Err(Error::Empty("no training images"));
        }
        let epoch = self.epoch + 1;
        if cfg.refreshes_at(epoch) {
            self.bank = Some(self.build_bank(cfg, cache, labels, epoch)?);
            self.bank_epochs.push(epoch);
        }
        let blending = cfg.blends_at(epoch);
        let lr = cfg.schedule.learning_rate_at(epoch);
        let mut order: Vec<usize> = (0..cache.len()).collect();
        order.shuffle(&mut self.order_rng);
        let mut rows = Vec::new();
        for idx in order.chunks(cfg.schedule.batch_size) {
            let feats: Vec<GlobalFeatureMap> = idx
                .iter()
                .map(|&i| match &cache.flipped {
                    Some(fl) if cfg.flip && self.augment_rng.gen_bool(0.5) => fl[i].clone(),
                    _ => cache.plain[i].clone(),
                })
                .collect();
            let y = labels.select_rows(idx);
            let opts = StepOptions {
                instance: blending && cfg.toggles.instance,
                prototype: if blending && cfg.toggles.prototype { self.bank.as_ref() } else { None },
                contrastive: cfg.toggles.contrastive,
                vector_space: cfg.toggles.vector_space,
                lambda: cfg.loss.lambda,
                pair_policy: cfg.pair_policy,
            };
            let mut grads = Gradients::zeros(&self.model);
            let out = self.model.step(&feats, &y, &opts, &mut self.prototype_rng, &mut grads)?;
            self.optimizer.step(self.model.parameters_mut(), &grads.slices(), lr)?;
            self.iteration += 1;
            rows.push(TraceRow {
                epoch,
                iteration: self.iteration,
                cls: out.cls.total(),
                cst: out.cst,
                total: out.total,
                mean_alpha: self.model.alpha.mean_effective(),
                mean_beta: self.model.beta.mean_effective(),
                clean: out.cls.clean,
                instance: out.cls.instance,
                prototype: out.cls.prototype,
            });
        }
        self.epoch = epoch;
        Ok(rows)
    }
}
