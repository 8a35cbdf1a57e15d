//! Dataset loading, single runs with checkpoints, and multi-run grids.

use std::path::{Path, PathBuf};

use dsrb_core::backbone::{generate_range, ChannelStandardizer, ConvLayer, Image};
use dsrb_core::csrl::GlobalFeatureMap;
use dsrb_core::labelspace::{drop_labels, LabelMatrix, ProportionSpec};
use dsrb_core::metrics::{evaluate_scores, EvalReport};
use dsrb_core::model::{AdjacencyKind, Model};
use dsrb_core::rng::{derive_seed, Stream};
use dsrb_core::train::{FeatureCache, Toggles, TraceRow, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::error::{Error, Result};
use crate::io::{self, LabelledImages};
use crate::report::{Report, RunRecord};

const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub categories: Vec<String>,
    pub train: LabelledImages,
    pub test: LabelledImages,
}

fn synthetic_split(scene: &dsrb_core::backbone::SyntheticSceneSpec, range: std::ops::Range<usize>) -> Result<LabelledImages> {
    let d = generate_range(scene, range.clone())?;
    Ok(LabelledImages {
        categories: synthetic_names(scene.categories),
        files: range.map(|i| format!("images/{i:06}.png")).collect(),
        images: d.images,
        labels: d.labels,
    })
}

/// Names of synthetic categories: `<colour>-<shape>`.
pub fn synthetic_names(categories: usize) -> Vec<String> {
    dsrb_core::backbone::archetype_catalog()
        .into_iter()
        .take(categories)
        .map(|a| {
            let color = match a.color {
                [220, 50, 40] => "red",
                [40, 200, 60] => "green",
                [50, 80, 230] => "blue",
                _ => "yellow",
            };
            format!("{color}-{:?}", a.shape).to_lowercase()
        })
        .collect()
}

fn coco_split(annotations: &Path, root: &Path, h: usize, w: usize) -> Result<LabelledImages> {
    let coco = io::read_coco(annotations)?;
    let images = coco
        .files
        .iter()
        .map(|f| io::load_image(&root.join(f), h, w))
        .collect::<Result<Vec<Image>>>()?;
    Ok(LabelledImages {
        categories: coco.categories,
        files: coco.files,
        images,
        labels: coco.labels,
    })
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (h, w) = (cfg.backbone.input_height, cfg.backbone.input_width);
    let (train, test) = match &cfg.dataset {
        DatasetConfig::Synthetic {
            scene,
            train_images,
            test_images,
        } => (
            synthetic_split(scene, 0..*train_images)?,
            synthetic_split(scene, *train_images..train_images + test_images)?,
        ),
        DatasetConfig::Directory { train, test } => (io::load_image_dir(train, h, w)?, io::load_image_dir(test, h, w)?),
        DatasetConfig::Coco {
            train_annotations,
            train_images,
            test_annotations,
            test_images,
        } => (
            coco_split(train_annotations, train_images, h, w)?,
            coco_split(test_annotations, test_images, h, w)?,
        ),
    };
    if train.categories != test.categories {
        return Err(Error::Config("train and test splits name different categories".into()));
    }
    if train.categories.len() != cfg.model.categories {
        return Err(Error::Config(format!(
            "dataset has {} categories but the model has {}",
            train.categories.len(),
            cfg.model.categories
        )));
    }
    Ok(Dataset {
        categories: train.categories.clone(),
        train,
        test,
    })
}

/// Partial training labels for one run.
pub fn partial_labels(full: &LabelMatrix, proportion: f64, seed: u64) -> Result<LabelMatrix> {
    let spec = ProportionSpec::new(proportion, derive_seed(seed, Stream::LabelDrop as u64))?;
    Ok(drop_labels(full, &spec)?)
}

pub fn build_model(cfg: &ExperimentConfig, categories: &[String], partial: &LabelMatrix, seed: u64) -> Result<Model> {
    let labels = (cfg.model.adjacency == AdjacencyKind::Cooccurrence).then_some(partial);
    let mut model = Model::new(&cfg.model, cfg.backbone.clone(), seed, labels)?;
    if let Some(path) = &cfg.embeddings {
        let e = io::read_embeddings(path, categories)?;
        if e.dim != cfg.model.embed_dim {
            return Err(Error::Config(format!(
                "embedding file has dimension {} but model.embed_dim is {}",
                e.dim, cfg.model.embed_dim
            )));
        }
        model.embeddings = e;
    }
    Ok(model)
}

/// Frozen-stage features of both splits for one backbone.
#[derive(Debug, Clone)]
pub struct Features {
    pub train: FeatureCache,
    pub test: Vec<GlobalFeatureMap>,
    /// Fitted on the training split unless the model already carried one.
    pub standardizer: Option<ChannelStandardizer>,
    source: Vec<ConvLayer>,
}

impl Features {
    pub fn extract(model: &Model, data: &Dataset, flip: bool) -> Result<Self> {
        let mut backbone = model.backbone.clone();
        let mut train = FeatureCache::build(&backbone, &data.train.images, flip)?;
        if backbone.config.standardize && backbone.standardizer.is_none() {
            let s = ChannelStandardizer::fit(&train.plain)?;
            for f in train.plain.iter_mut().chain(train.flipped.iter_mut().flatten()) {
                s.apply(f);
            }
            backbone.standardizer = Some(s);
        }
        let test = data
            .test
            .images
            .iter()
            .map(|im| backbone.extract_frozen(im))
            .collect::<dsrb_core::Result<Vec<_>>>()?;
        Ok(Self {
            train,
            test,
            standardizer: backbone.standardizer,
            source: model.backbone.layers[..model.backbone.frozen_depth()].to_vec(),
        })
    }

    /// Whether these features were extracted with `model`'s frozen stages
    /// and standardizer.
    pub fn matches(&self, model: &Model) -> bool {
        self.source[..] == model.backbone.layers[..model.backbone.frozen_depth()]
            && self.standardizer == model.backbone.standardizer
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub proportion: f64,
    pub seed: u64,
    pub toggles: Toggles,
    pub trainer: Trainer,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        io::save_archive(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = io::load_archive(path)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("checkpoint format {} is not supported", ck.format),
            });
        }
        Ok(ck)
    }
}

/// One training run: a method, a proportion and a seed.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub method: String,
    pub toggles: Toggles,
    pub proportion: f64,
    pub seed: u64,
    /// Where traces, checkpoints and the report go; `None` keeps everything in memory.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
    pub report: EvalReport,
}

pub const TRACE_FILE: &str = "trace.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const BANK_FILE: &str = "bank.bin";
pub const RUN_REPORT_FILE: &str = "report.json";

pub fn run_dir(root: &Path, method: &str, proportion: f64, seed: u64) -> PathBuf {
    root.join(method)
        .join(format!("p{:03}", (proportion * 100.0).round() as u32))
        .join(format!("seed{seed}"))
}

/// Clean-path metrics of a model on frozen-stage test features.
pub fn evaluate_model(model: &Model, test: &[GlobalFeatureMap], labels: &LabelMatrix, threshold: f64, proportion: Option<f64>) -> Result<EvalReport> {
    if labels.categories() != model.categories() {
        return Err(dsrb_core::Error::ShapeMismatch {
            what: "evaluation categories",
            expected: model.categories(),
            actual: labels.categories(),
        }
        .into());
    }
    let scores = model.predict(test)?;
    let mut report = evaluate_scores(&scores, labels, threshold)?;
    report.proportion = proportion;
    Ok(report)
}

/// Trains (resuming from the run directory's checkpoint if one exists) and
/// evaluates on the test split. `after_epoch` sees every finished epoch.
pub fn train_and_evaluate(
    cfg: &ExperimentConfig,
    data: &Dataset,
    features: &Features,
    run: &RunSpec,
    mut after_epoch: impl FnMut(&Trainer, &[TraceRow]),
) -> Result<RunOutcome> {
    let mut tcfg = cfg.train.clone();
    tcfg.toggles = run.toggles;
    let partial = partial_labels(&data.train.labels, run.proportion, run.seed)?;
    let paths = run.dir.as_ref().map(|d| (d.join(TRACE_FILE), d.join(CHECKPOINT_FILE), d.join(BANK_FILE)));
    let resumed = match &paths {
        Some((trace, ckpt, _)) if ckpt.exists() => {
            let ck = Checkpoint::load(ckpt)?;
            if ck.proportion != run.proportion || ck.seed != run.seed || ck.toggles != run.toggles {
                return Err(Error::Config(format!("{} belongs to a different run", ckpt.display())));
            }
            io::truncate_trace(trace, ck.trainer.epoch)?;
            Some(ck.trainer)
        }
        Some((trace, _, _)) => {
            if trace.exists() {
                std::fs::remove_file(trace).map_err(crate::error::io_err(trace))?;
            }
            None
        }
        None => None,
    };
    let mut trainer = match resumed {
        Some(t) => t,
        None => {
            let mut model = build_model(cfg, &data.categories, &partial, run.seed)?;
            model.backbone.standardizer = features.standardizer.clone();
            Trainer::new(model, &tcfg, run.seed)?
        }
    };
    if !features.matches(&trainer.model) {
        return Err(Error::Config("cached features come from a different backbone".into()));
    }
    let mut trace = match &paths {
        Some((t, _, _)) if t.exists() => io::read_trace(t)?,
        _ => Vec::new(),
    };
    while !trainer.is_finished(&tcfg) {
        let banks_before = trainer.bank_epochs.len();
        let rows = trainer.run_epoch(&tcfg, &features.train, &partial)?;
        if let Some((t, c, b)) = &paths {
            io::append_trace(t, &rows)?;
            if trainer.bank_epochs.len() != banks_before {
                if let Some(bank) = &trainer.bank {
                    io::save_bank(b, bank)?;
                }
            }
            Checkpoint {
                format: CHECKPOINT_FORMAT,
                proportion: run.proportion,
                seed: run.seed,
                toggles: run.toggles,
                trainer: trainer.clone(),
            }
            .save(c)?;
        }
        after_epoch(&trainer, &rows);
        trace.extend(rows);
    }
    let report = evaluate_model(&trainer.model, &features.test, &data.test.labels, cfg.threshold, Some(run.proportion))?;
    if let Some(dir) = &run.dir {
        io::write_json(&dir.join(RUN_REPORT_FILE), &report)?;
    }
    Ok(RunOutcome {
        checkpoint: Checkpoint {
            format: CHECKPOINT_FORMAT,
            proportion: run.proportion,
            seed: run.seed,
            toggles: run.toggles,
            trainer,
        },
        trace,
        report,
    })
}

/// A named toggle set; a row of the report.
#[derive(Debug, Clone, PartialEq)]
pub struct Method {
    pub name: String,
    pub toggles: Toggles,
}

impl Method {
    pub fn new(name: &str, toggles: Toggles) -> Self {
        Self {
            name: name.into(),
            toggles,
        }
    }

    /// Baseline, each blending branch alone, and both.
    pub fn ablation() -> Vec<Method> {
        vec![
            Method::new("baseline", Toggles::baseline()),
            Method::new("iprb", Toggles::instance_only()),
            Method::new("pprb", Toggles::prototype_only()),
            Method::new("dsrb", Toggles::full()),
        ]
    }
}

/// Progress messages from [`run_grid`].
pub type Progress<'a> = &'a mut dyn FnMut(&str);

/// Every method at every proportion for every seed. Features are extracted
/// once per seed and shared by all runs of that seed.
pub fn run_grid(
    cfg: &ExperimentConfig,
    data: &Dataset,
    methods: &[Method],
    root: Option<&Path>,
    progress: Progress<'_>,
) -> Result<Report> {
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let probe = build_model(cfg, &data.categories, &data.train.labels, seed)?;
        let features = Features::extract(&probe, data, cfg.train.flip)?;
        for m in methods {
            for &p in &cfg.proportions {
                let run = RunSpec {
                    method: m.name.clone(),
                    toggles: m.toggles,
                    proportion: p,
                    seed,
                    dir: root.map(|r| run_dir(r, &m.name, p, seed)),
                };
                progress(&format!("{} p={p} seed={seed}", m.name));
                let out = train_and_evaluate(cfg, data, &features, &run, |t, rows| {
                    if let Some(last) = rows.last() {
                        progress(&format!(
                            "  epoch {} loss {:.4} (cls {:.4}, cst {:.4})",
                            t.epoch, last.total, last.cls, last.cst
                        ));
                    }
                })?;
                progress(&format!("  mAP {:.2}", out.report.map * 100.0));
                records.push(RunRecord {
                    method: m.name.clone(),
                    seed,
                    report: out.report,
                });
            }
        }
    }
    let order: Vec<String> = methods.iter().map(|m| m.name.clone()).collect();
    Report::from_runs(&cfg.name, &cfg.proportions, &order, records)
}
