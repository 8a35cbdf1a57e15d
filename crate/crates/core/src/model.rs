//! The full network: backbone tail, semantic decoupling, gated head and the
//! two blending branches, with a hand-written backward pass.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, ConvLayer};
use crate::csrl::{
    contrastive_batch_loss_grad, decouple_backward, decouple_with_queries, pool, pool_backward, CategoryEmbeddings,
    CategoryFeatureMaps, CategoryVectors, GlobalFeatureMap, PairPolicy, Pooling, SemanticDecoupler,
};
use crate::error::{check_len, Error, Result};
use crate::heads::{partial_bce_grad, Adjacency, ClassificationLoss, GatedHead, HeadParams};
use crate::iprb::{blend_batch, BlendCoefficients};
use crate::labelspace::LabelMatrix;
use crate::linalg::dot;
use crate::pprb::{blend_prototype_backward, blend_prototype_masked, draw_prototype, PrototypeBank};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AdjacencyKind {
    #[default]
    Uniform,
    Identity,
    /// Conditional co-occurrence of known positives in the training labels.
    Cooccurrence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub categories: usize,
    pub embed_dim: usize,
    pub joint_dim: usize,
    pub head_steps: usize,
    pub pooling: Pooling,
    pub adjacency: AdjacencyKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            categories: 12,
            embed_dim: 32,
            joint_dim: 32,
            head_steps: 3,
            pooling: Pooling::Sum,
            adjacency: AdjacencyKind::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub backbone: Backbone,
    pub embeddings: CategoryEmbeddings,
    pub decoupler: SemanticDecoupler,
    pub head: GatedHead,
    pub pooling: Pooling,
    pub alpha: BlendCoefficients,
    pub beta: BlendCoefficients,
}

/// Same layout as the trainable parameters of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tail: Vec<ConvLayer>,
    pub decoupler: SemanticDecoupler,
    pub head: HeadParams,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Gradients {
    pub fn zeros(model: &Model) -> Self {
        Self {
            tail: model.trainable_layers().iter().map(ConvLayer::zeros_like).collect(),
            decoupler: model.decoupler.zeros_like(),
            head: HeadParams::zeros(model.categories(), model.head.params.dim),
            alpha: vec![0.0; model.alpha.categories()],
            beta: vec![0.0; model.beta.categories()],
        }
    }

    /// Flat views, in the order of [`Model::parameters_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.tail {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.extend(self.decoupler.slices());
        out.extend(self.head.slices());
        out.push(&self.alpha);
        out.push(&self.beta);
        out
    }
}

/// Which branches a training step runs.
#[derive(Debug, Clone, Copy)]
pub struct StepOptions<'a> {
    pub instance: bool,
    /// The prototype branch runs when a bank is given.
    pub prototype: Option<&'a PrototypeBank>,
    pub contrastive: bool,
    /// Blend pooled vectors with the pooled category mean instead of maps
    /// with spatial-bin prototypes.
    pub vector_space: bool,
    pub lambda: f64,
    pub pair_policy: PairPolicy,
}

/// Batch-mean losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepOutcome {
    pub cls: ClassificationLoss,
    pub cst: f64,
    pub total: f64,
    pub instance_blends: usize,
    pub prototype_draws: usize,
}

#[derive(Clone, Copy)]
enum Path {
    Clean,
    Instance,
    Prototype,
}

enum ProtoBlend {
    Maps(crate::pprb::PrototypeBlend),
    Vector { category: usize, proto: Vec<f64> },
    Untouched,
}

impl Model {
    pub fn new(config: &ModelConfig, backbone: BackboneConfig, seed: u64, train_labels: Option<&LabelMatrix>) -> Result<Self> {
        let (d, h, w) = backbone.output_shape()?;
        let c = config.categories;
        if c == 0 {
            return Err(Error::InvalidConfig("model needs at least one category".into()));
        }
        let mut init = stream(seed, Stream::Init);
        let backbone = Backbone::random(backbone, &mut init)?;
        let decoupler = SemanticDecoupler::random(d, config.embed_dim, config.joint_dim, h, w, &mut init);
        let params = HeadParams::random(c, d, &mut init);
        let adjacency = match (config.adjacency, train_labels) {
            (AdjacencyKind::Uniform, _) => Adjacency::uniform(c),
            (AdjacencyKind::Identity, _) => Adjacency::identity(c),
            (AdjacencyKind::Cooccurrence, Some(y)) => {
                check_len("label categories", c, y.categories())?;
                Adjacency::from_cooccurrence(y)
            }
            (AdjacencyKind::Cooccurrence, None) => {
                return Err(Error::InvalidConfig("co-occurrence adjacency needs training labels".into()))
            }
        };
        let head = GatedHead::new(adjacency, config.head_steps, params)?;
        let mut emb = stream(seed, Stream::Embedding);
        let embeddings = CategoryEmbeddings::random(c, config.embed_dim, seed, &mut emb);
        Ok(Self {
            backbone,
            embeddings,
            decoupler,
            head,
            pooling: config.pooling,
            alpha: BlendCoefficients::new(c),
            beta: BlendCoefficients::new(c),
        })
    }

    pub fn categories(&self) -> usize {
        self.head.params.categories
    }

    fn trainable_layers(&self) -> &[ConvLayer] {
        &self.backbone.layers[self.backbone.frozen_depth()..]
    }

    fn tail_is_trainable(&self) -> bool {
        self.backbone.frozen_depth() < self.backbone.layers.len()
    }

    /// Trainable parameters with a flag saying whether weight decay applies.
    pub fn parameters_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let depth = self.backbone.frozen_depth();
        let mut out: Vec<(&mut [f64], bool)> = Vec::new();
        for l in &mut self.backbone.layers[depth..] {
            out.push((&mut l.weight, true));
            out.push((&mut l.bias, false));
        }
        out.extend(self.decoupler.slices_mut().into_iter().map(|s| (s, true)));
        let head_decay = [true, true, false, true, true, false, true, true, false, true, false];
        out.extend(self.head.params.slices_mut().into_iter().zip(head_decay));
        out.push((&mut self.alpha.raw, false));
        out.push((&mut self.beta.raw, false));
        out
    }

    fn check_features(&self, g: &GlobalFeatureMap) -> Result<()> {
        check_len("feature channels", self.decoupler.feature_dim, g.channels)?;
        check_len("feature height", self.decoupler.height, g.height)?;
        check_len("feature width", self.decoupler.width, g.width)
    }

    /// Category maps for the output of the frozen backbone stages.
    pub fn category_maps(&self, frozen: &GlobalFeatureMap, queries: &[f64]) -> Result<CategoryFeatureMaps> {
        let (g, _) = self.backbone.forward_tail(frozen);
        self.check_features(&g)?;
        decouple_with_queries(&g, queries, self.categories())
    }

    pub fn queries(&self) -> Result<Vec<f64>> {
        self.decoupler.queries(&self.embeddings)
    }

    /// Clean-path scores, `N x C`, for frozen-stage features.
    pub fn predict(&self, frozen: &[GlobalFeatureMap]) -> Result<Vec<f64>> {
        let q = self.queries()?;
        let c = self.categories();
        let mut out = Vec::with_capacity(frozen.len() * c);
        for chunk in frozen.chunks(64) {
            let mut stacked = Vec::new();
            for f in chunk {
                stacked.extend(pool(&self.category_maps(f, &q)?, self.pooling).data);
            }
            out.extend(self.head.forward_batch(&stacked, chunk.len()).scores);
        }
        Ok(out)
    }

    /// Forward and backward over one batch of frozen-stage features.
    ///
    /// The objective is the batch mean of the summed per-path partial BCE
    /// plus `lambda` times the contrastive loss on the clean vectors.
    /// Gradients are accumulated into `grads`.
    pub fn step<R: Rng + ?Sized>(
        &self,
        frozen: &[GlobalFeatureMap],
        labels: &LabelMatrix,
        opts: &StepOptions<'_>,
        rng: &mut R,
        grads: &mut Gradients,
    ) -> Result<StepOutcome> {
        let b = frozen.len();
        if b == 0 {
            return Err(Error::Empty("empty batch"));
        }
        check_len("batch labels", b, labels.rows())?;
        let c = self.categories();
        check_len("label categories", c, labels.categories())?;
        let q = self.queries()?;
        let mut globals = Vec::with_capacity(b);
        let mut tapes = Vec::with_capacity(b);
        for f in frozen {
            let (g, tape) = self.backbone.forward_tail(f);
            self.check_features(&g)?;
            globals.push(g);
            tapes.push(tape);
        }
        let fmaps = globals
            .iter()
            .map(|g| decouple_with_queries(g, &q, c))
            .collect::<Result<Vec<_>>>()?;
        let (d, hw) = (fmaps[0].channels, fmaps[0].spatial());
        let vlen = c * d;
        let clean: Vec<CategoryVectors> = fmaps.iter().map(|m| pool(m, self.pooling)).collect();

        let mut rows: Vec<(Path, usize)> = Vec::with_capacity(3 * b);
        let mut stacked: Vec<f64> = Vec::with_capacity(3 * b * vlen);
        let mut row_labels: Vec<Vec<f64>> = Vec::with_capacity(3 * b);
        for (n, v) in clean.iter().enumerate() {
            rows.push((Path::Clean, n));
            stacked.extend_from_slice(&v.data);
            row_labels.push(labels.row(n).to_vec());
        }

        let instance = if opts.instance {
            let blend = blend_batch(&fmaps, labels, &self.alpha)?;
            for (n, m) in blend.maps.iter().enumerate() {
                rows.push((Path::Instance, n));
                stacked.extend(pool(m, self.pooling).data);
                row_labels.push(blend.labels.row(n).to_vec());
            }
            Some(blend)
        } else {
            None
        };

        let mut protos: Vec<ProtoBlend> = Vec::new();
        if let Some(bank) = opts.prototype {
            check_len("bank categories", c, bank.categories)?;
            check_len("bank map size", fmaps[0].map_len(), bank.map_len())?;
            for (n, f_n) in fmaps.iter().enumerate() {
                let y_n = labels.row(n);
                let pb = if opts.vector_space {
                    self.blend_vector(&clean[n], y_n, bank, rng)
                } else {
                    let draw = draw_prototype(f_n, y_n, bank, rng);
                    ProtoBlend::Maps(blend_prototype_masked(f_n, y_n, bank, &self.beta, draw)?)
                };
                rows.push((Path::Prototype, n));
                let mut lab = y_n.to_vec();
                match &pb {
                    ProtoBlend::Maps(m) => {
                        stacked.extend(pool(&m.maps, self.pooling).data);
                        lab = m.labels.clone();
                    }
                    ProtoBlend::Vector { category, proto } => {
                        let beta = self.beta.effective(*category);
                        let mut v = clean[n].data.clone();
                        for (x, &p) in v[category * d..(category + 1) * d].iter_mut().zip(proto) {
                            *x = beta * *x + (1.0 - beta) * p;
                        }
                        stacked.extend(v);
                        lab[*category] = 1.0 - beta;
                    }
                    ProtoBlend::Untouched => stacked.extend_from_slice(&clean[n].data),
                }
                row_labels.push(lab);
                protos.push(pb);
            }
        }

        let total_rows = rows.len();
        let tape = self.head.forward_batch(&stacked, total_rows);
        let inv_b = 1.0 / b as f64;
        let mut cls = ClassificationLoss::default();
        let mut dlogits = vec![0.0; total_rows * c];
        let mut dlabels = vec![0.0; total_rows * c];
        for (r, &(path, _)) in rows.iter().enumerate() {
            let g = partial_bce_grad(&row_labels[r], &tape.scores[r * c..(r + 1) * c]);
            let slot = match path {
                Path::Clean => &mut cls.clean,
                Path::Instance => &mut cls.instance,
                Path::Prototype => &mut cls.prototype,
            };
            *slot += g.bce.loss * inv_b;
            for (o, &x) in dlogits[r * c..(r + 1) * c].iter_mut().zip(&g.dlogits) {
                *o = x * inv_b;
            }
            for (o, &x) in dlabels[r * c..(r + 1) * c].iter_mut().zip(&g.dlabels) {
                *o = x * inv_b;
            }
        }
        let mut dvec = self.head.backward_batch(&tape, &dlogits, &mut grads.head);

        let mut cst = 0.0;
        if opts.contrastive {
            let (loss, dv) = contrastive_batch_loss_grad(&clean, labels, opts.pair_policy)?;
            cst = loss.loss;
            for (n, g) in dv.iter().enumerate() {
                for (o, &x) in dvec[n * vlen..(n + 1) * vlen].iter_mut().zip(g) {
                    *o += opts.lambda * x;
                }
            }
        }

        let map_len = fmaps[0].maps.len();
        let mut dmaps: Vec<Vec<f64>> = vec![vec![0.0; map_len]; b];
        for (n, dm) in dmaps.iter_mut().enumerate() {
            pool_backward(&fmaps[n].maps, hw, self.pooling, &dvec[n * vlen..(n + 1) * vlen], dm);
        }
        let mut instance_blends = 0;
        if let Some(blend) = &instance {
            instance_blends = blend.blended_entries();
            let mut dblended: Vec<Vec<f64>> = vec![vec![0.0; map_len]; b];
            for (n, dbl) in dblended.iter_mut().enumerate() {
                let r = b + n;
                pool_backward(&blend.maps[n].maps, hw, self.pooling, &dvec[r * vlen..(r + 1) * vlen], dbl);
            }
            blend.backward(&fmaps, &self.alpha, &dblended, &dlabels[b * c..2 * b * c], &mut dmaps, &mut grads.alpha);
        }
        let mut prototype_draws = 0;
        if let Some(bank) = opts.prototype {
            let base = if instance.is_some() { 2 * b } else { b };
            for (n, pb) in protos.iter().enumerate() {
                let r = base + n;
                let dv = &dvec[r * vlen..(r + 1) * vlen];
                let dl = &dlabels[r * c..(r + 1) * c];
                match pb {
                    ProtoBlend::Maps(m) => {
                        let mut dbl = vec![0.0; map_len];
                        pool_backward(&m.maps.maps, hw, self.pooling, dv, &mut dbl);
                        blend_prototype_backward(&fmaps[n], bank, &self.beta, m.draw, &dbl, dl, &mut dmaps[n], &mut grads.beta);
                        prototype_draws += m.draw.is_some() as usize;
                    }
                    ProtoBlend::Vector { category, proto } => {
                        let beta = self.beta.effective(*category);
                        let span = category * d..(category + 1) * d;
                        let mut scaled = dv.to_vec();
                        scaled[span.clone()].iter_mut().for_each(|x| *x *= beta);
                        pool_backward(&fmaps[n].maps, hw, self.pooling, &scaled, &mut dmaps[n]);
                        let diff: Vec<f64> = clean[n].data[span.clone()].iter().zip(proto).map(|(v, p)| v - p).collect();
                        let dbeta = dot(&dv[span], &diff) - dl[*category];
                        grads.beta[*category] += dbeta * beta * (1.0 - beta);
                        prototype_draws += 1;
                    }
                    ProtoBlend::Untouched => {
                        pool_backward(&fmaps[n].maps, hw, self.pooling, dv, &mut dmaps[n]);
                    }
                }
            }
        }

        let trainable = self.tail_is_trainable();
        let mut dq = vec![0.0; q.len()];
        for n in 0..b {
            let mut dglobal = if trainable { Some(vec![0.0; globals[n].data.len()]) } else { None };
            let g = decouple_backward(&globals[n], &q, &fmaps[n], &dmaps[n], dglobal.as_deref_mut());
            dq.iter_mut().zip(&g).for_each(|(a, &x)| *a += x);
            if let Some(dg) = dglobal {
                self.backbone.backward_tail(&tapes[n], &dg, &mut grads.tail);
            }
        }
        self.decoupler.queries_backward(&self.embeddings, &dq, &mut grads.decoupler);

        let total = cls.total() + opts.lambda * cst;
        Ok(StepOutcome {
            cls,
            cst,
            total,
            instance_blends,
            prototype_draws,
        })
    }

    /// Vector-space prototype blending: one unknown category whose bank has
    /// any positive, mixed with the pooled category mean.
    fn blend_vector<R: Rng + ?Sized>(&self, v: &CategoryVectors, y_n: &[f64], bank: &PrototypeBank, rng: &mut R) -> ProtoBlend {
        let eligible: Vec<usize> = (0..v.categories)
            .filter(|&c| y_n[c] == 0.0 && (0..bank.bins()).any(|b| bank.is_usable(c, b)))
            .collect();
        if eligible.is_empty() {
            return ProtoBlend::Untouched;
        }
        let category = eligible[rng.gen_range(0..eligible.len())];
        let mean = CategoryFeatureMaps {
            categories: 1,
            channels: bank.channels,
            height: bank.height,
            width: bank.width,
            maps: bank.category_mean(category).to_vec(),
            attention: vec![0.0; bank.height * bank.width],
        };
        ProtoBlend::Vector {
            category,
            proto: pool(&mean, self.pooling).data,
        }
    }
}
