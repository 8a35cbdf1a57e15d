//! Category-specific representation learning.
//!
//! A global feature map is decoupled into one attention-weighted map per
//! category, pooled into per-category vectors, and those vectors are pulled
//! together across images that share a positive label by a cosine loss.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::labelspace::LabelMatrix;
use crate::linalg::{dot, gemm, norm};
use crate::rng::normal;

/// Backbone output, `D x H x W`, channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalFeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GlobalFeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_len("global feature map", channels * height * width, data.len())?;
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingSource {
    RandomInit { seed: u64 },
    FileLoaded,
}

/// One semantic vector per category, `C x d_e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEmbeddings {
    pub categories: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub source: EmbeddingSource,
}

impl CategoryEmbeddings {
    pub fn random<R: Rng + ?Sized>(categories: usize, dim: usize, seed: u64, rng: &mut R) -> Self {
        let scale = 1.0 / libm::sqrt(dim as f64);
        let data = (0..categories * dim).map(|_| normal(rng) * scale).collect();
        Self {
            categories,
            dim,
            data,
            source: EmbeddingSource::RandomInit { seed },
        }
    }

    pub fn from_rows(categories: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        check_len("category embeddings", categories * dim, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite embedding entry".into()));
        }
        Ok(Self {
            categories,
            dim,
            data,
            source: EmbeddingSource::FileLoaded,
        })
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.dim..(c + 1) * self.dim]
    }
}

/// Per-category maps `C x D x H x W` plus the attention maps `C x H x W`
/// that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryFeatureMaps {
    pub categories: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub maps: Vec<f64>,
    pub attention: Vec<f64>,
}

impl CategoryFeatureMaps {
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn map_len(&self) -> usize {
        self.channels * self.spatial()
    }

    pub fn category(&self, c: usize) -> &[f64] {
        let len = self.map_len();
        &self.maps[c * len..(c + 1) * len]
    }

    pub fn category_mut(&mut self, c: usize) -> &mut [f64] {
        let len = self.map_len();
        &mut self.maps[c * len..(c + 1) * len]
    }

    pub fn attention_map(&self, c: usize) -> &[f64] {
        let hw = self.spatial();
        &self.attention[c * hw..(c + 1) * hw]
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            categories: self.categories,
            channels: self.channels,
            height: self.height,
            width: self.width,
            maps: vec![0.0; self.maps.len()],
            attention: vec![0.0; self.attention.len()],
        }
    }
}

/// Pooled per-category representations, `C x D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryVectors {
    pub categories: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl CategoryVectors {
    pub fn new(categories: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        check_len("category vectors", categories * dim, data.len())?;
        Ok(Self {
            categories,
            dim,
            data,
        })
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.dim..(c + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Pooling {
    /// Spatial sum of each category map, i.e. the attention-weighted
    /// average of the global map.
    #[default]
    Sum,
    Mean,
    Max,
}

/// Low-rank bilinear attention scorer.
///
/// The logit for category `c` at cell `(h, w)` is
/// `scorer . ((feature_proj f(h, w)) * (embed_proj e_c))`, which collapses to
/// a per-category query `q_c = feature_proj^T (scorer * embed_proj e_c)`
/// dotted with the local feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticDecoupler {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub joint_dim: usize,
    pub height: usize,
    pub width: usize,
    /// `joint_dim x feature_dim`
    pub feature_proj: Vec<f64>,
    /// `joint_dim x embed_dim`
    pub embed_proj: Vec<f64>,
    /// `joint_dim`
    pub scorer: Vec<f64>,
}

impl SemanticDecoupler {
    pub fn zeros(feature_dim: usize, embed_dim: usize, joint_dim: usize, height: usize, width: usize) -> Self {
        Self {
            feature_dim,
            embed_dim,
            joint_dim,
            height,
            width,
            feature_proj: vec![0.0; joint_dim * feature_dim],
            embed_proj: vec![0.0; joint_dim * embed_dim],
            scorer: vec![0.0; joint_dim],
        }
    }

    pub fn random<R: Rng + ?Sized>(
        feature_dim: usize,
        embed_dim: usize,
        joint_dim: usize,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let mut d = Self::zeros(feature_dim, embed_dim, joint_dim, height, width);
        let sf = 1.0 / libm::sqrt(feature_dim as f64);
        let se = 1.0 / libm::sqrt(embed_dim as f64);
        d.feature_proj.iter_mut().for_each(|x| *x = normal(rng) * sf);
        d.embed_proj.iter_mut().for_each(|x| *x = normal(rng) * se);
        d.scorer.iter_mut().for_each(|x| *x = normal(rng));
        d
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self::zeros(self.feature_dim, self.embed_dim, self.joint_dim, self.height, self.width)
    }

    pub(crate) fn slices(&self) -> [&[f64]; 3] {
        [&self.feature_proj, &self.embed_proj, &self.scorer]
    }

    pub(crate) fn slices_mut(&mut self) -> [&mut [f64]; 3] {
        [&mut self.feature_proj, &mut self.embed_proj, &mut self.scorer]
    }

    /// Per-category attention queries, `C x D`.
    pub fn queries(&self, e: &CategoryEmbeddings) -> Result<Vec<f64>> {
        check_len("embedding dim", self.embed_dim, e.dim)?;
        let (c, j) = (e.categories, self.joint_dim);
        // z = E V^T : C x j
        let mut z = vec![0.0; c * j];
        gemm(c, self.embed_dim, j, &e.data, false, &self.embed_proj, true, 0.0, &mut z);
        for row in z.chunks_mut(j) {
            for (x, w) in row.iter_mut().zip(&self.scorer) {
                *x *= w;
            }
        }
        let mut q = vec![0.0; c * self.feature_dim];
        gemm(c, j, self.feature_dim, &z, false, &self.feature_proj, false, 0.0, &mut q);
        Ok(q)
    }

    /// Accumulates parameter gradients given `d loss / d queries`.
    pub(crate) fn queries_backward(&self, e: &CategoryEmbeddings, dq: &[f64], grad: &mut SemanticDecoupler) {
        let (c, j, d) = (e.categories, self.joint_dim, self.feature_dim);
        let mut z = vec![0.0; c * j];
        gemm(c, self.embed_dim, j, &e.data, false, &self.embed_proj, true, 0.0, &mut z);
        let mut u = z.clone();
        for row in u.chunks_mut(j) {
            for (x, w) in row.iter_mut().zip(&self.scorer) {
                *x *= w;
            }
        }
        // q = u U  ->  dU += u^T dq, du = dq U^T
        gemm(j, c, d, &u, true, dq, false, 1.0, &mut grad.feature_proj);
        let mut du = vec![0.0; c * j];
        gemm(c, d, j, dq, false, &self.feature_proj, true, 0.0, &mut du);
        // u = z * w
        let mut dz = du.clone();
        for ci in 0..c {
            for k in 0..j {
                grad.scorer[k] += du[ci * j + k] * z[ci * j + k];
                dz[ci * j + k] = du[ci * j + k] * self.scorer[k];
            }
        }
        // z = E V^T -> dV += dz^T E
        gemm(j, c, self.embed_dim, &dz, true, &e.data, false, 1.0, &mut grad.embed_proj);
    }
}

fn softmax_rows(logits: &mut [f64], width: usize) {
    for row in logits.chunks_mut(width) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = libm::exp(*x - max);
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

/// Softmax-normalizes `C x H x W` attention logits and reweights `f` with them.
pub fn decouple_from_logits(f: &GlobalFeatureMap, categories: usize, logits: &[f64]) -> Result<CategoryFeatureMaps> {
    let hw = f.spatial();
    check_len("attention logits", categories * hw, logits.len())?;
    let mut attention = logits.to_vec();
    softmax_rows(&mut attention, hw);
    let d = f.channels;
    let mut maps = vec![0.0; categories * d * hw];
    for c in 0..categories {
        let a = &attention[c * hw..(c + 1) * hw];
        let out = &mut maps[c * d * hw..(c + 1) * d * hw];
        for (o_row, f_row) in out.chunks_mut(hw).zip(f.data.chunks(hw)) {
            for ((o, &x), &w) in o_row.iter_mut().zip(f_row).zip(a) {
                *o = w * x;
            }
        }
    }
    Ok(CategoryFeatureMaps {
        categories,
        channels: d,
        height: f.height,
        width: f.width,
        maps,
        attention,
    })
}

/// Decoupling with precomputed queries (see [`SemanticDecoupler::queries`]).
pub fn decouple_with_queries(f: &GlobalFeatureMap, queries: &[f64], categories: usize) -> Result<CategoryFeatureMaps> {
    check_len("queries", categories * f.channels, queries.len())?;
    let hw = f.spatial();
    let mut logits = vec![0.0; categories * hw];
    gemm(categories, f.channels, hw, queries, false, &f.data, false, 0.0, &mut logits);
    decouple_from_logits(f, categories, &logits)
}

/// Splits a global feature map into one attention-weighted map per category.
pub fn decouple(
    f: &GlobalFeatureMap,
    e: &CategoryEmbeddings,
    decoupler: &SemanticDecoupler,
) -> Result<CategoryFeatureMaps> {
    check_len("feature channels", decoupler.feature_dim, f.channels)?;
    check_len("feature height", decoupler.height, f.height)?;
    check_len("feature width", decoupler.width, f.width)?;
    let q = decoupler.queries(e)?;
    decouple_with_queries(f, &q, e.categories)
}

/// Backward through [`decouple_with_queries`].
///
/// Returns `d loss / d queries` (`C x D`); when `dfeature` is given the
/// gradient with respect to the global map is accumulated into it.
pub(crate) fn decouple_backward(
    f: &GlobalFeatureMap,
    queries: &[f64],
    fmaps: &CategoryFeatureMaps,
    dmaps: &[f64],
    dfeature: Option<&mut [f64]>,
) -> Vec<f64> {
    let (c_n, d, hw) = (fmaps.categories, f.channels, f.spatial());
    let mut dlogits = vec![0.0; c_n * hw];
    for c in 0..c_n {
        let a = fmaps.attention_map(c);
        let dm = &dmaps[c * d * hw..(c + 1) * d * hw];
        let dl = &mut dlogits[c * hw..(c + 1) * hw];
        for (dm_row, f_row) in dm.chunks(hw).zip(f.data.chunks(hw)) {
            for ((g, &x), &y) in dl.iter_mut().zip(dm_row).zip(f_row) {
                *g += x * y;
            }
        }
        let inner = dot(a, dl);
        for (g, &w) in dl.iter_mut().zip(a) {
            *g = w * (*g - inner);
        }
    }
    let mut dq = vec![0.0; c_n * d];
    gemm(c_n, hw, d, &dlogits, false, &f.data, true, 0.0, &mut dq);
    if let Some(df) = dfeature {
        for c in 0..c_n {
            let a = fmaps.attention_map(c);
            let dm = &dmaps[c * d * hw..(c + 1) * d * hw];
            for (df_row, dm_row) in df.chunks_mut(hw).zip(dm.chunks(hw)) {
                for ((g, &x), &w) in df_row.iter_mut().zip(dm_row).zip(a) {
                    *g += x * w;
                }
            }
        }
        gemm(d, c_n, hw, queries, true, &dlogits, false, 1.0, df);
    }
    dq
}

/// Pools each category map over space.
pub fn pool(fmaps: &CategoryFeatureMaps, pooling: Pooling) -> CategoryVectors {
    let (d, hw) = (fmaps.channels, fmaps.spatial());
    let mut data = Vec::with_capacity(fmaps.categories * d);
    for channel in fmaps.maps.chunks(hw) {
        let v = match pooling {
            Pooling::Sum => channel.iter().sum(),
            Pooling::Mean => channel.iter().sum::<f64>() / hw as f64,
            Pooling::Max => channel.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        };
        data.push(v);
    }
    CategoryVectors {
        categories: fmaps.categories,
        dim: d,
        data,
    }
}

/// Gradient of [`pool`] with respect to the category maps, accumulated into `dmaps`.
pub(crate) fn pool_backward(maps: &[f64], hw: usize, pooling: Pooling, dv: &[f64], dmaps: &mut [f64]) {
    for ((channel, out), &g) in maps.chunks(hw).zip(dmaps.chunks_mut(hw)).zip(dv) {
        match pooling {
            Pooling::Sum => out.iter_mut().for_each(|x| *x += g),
            Pooling::Mean => out.iter_mut().for_each(|x| *x += g / hw as f64),
            Pooling::Max => {
                let mut best = 0;
                for (i, &x) in channel.iter().enumerate() {
                    if x > channel[best] {
                        best = i;
                    }
                }
                out[best] += g;
            }
        }
    }
}

/// One cosine compactness term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    /// A zero-norm input forced the cosine to 0.
    pub degenerate: bool,
}

fn cosine(u: &[f64], v: &[f64]) -> Option<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        None
    } else {
        Some(dot(u, v) / (nu * nv))
    }
}

/// `1 - cos(u, v)` for a shared positive label, `1 + cos(u, v)` otherwise.
pub fn contrastive_pair_loss(u: &[f64], v: &[f64], both_positive: bool) -> PairLoss {
    let (cos, degenerate) = match cosine(u, v) {
        Some(c) => (c, false),
        None => (0.0, true),
    };
    let loss = if both_positive { 1.0 - cos } else { 1.0 + cos };
    PairLoss { loss, degenerate }
}

/// Which image pairs enter the batch contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PairPolicy {
    /// Every ordered pair; anything other than a shared positive is pushed apart.
    #[default]
    Literal,
    /// Only pairs where both labels of the category are known.
    KnownOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveLoss {
    /// Mean over summed terms.
    pub loss: f64,
    pub terms: usize,
    pub degenerate_pairs: usize,
    /// Batch had fewer than two images.
    pub undersized: bool,
}

/// Mean compactness loss over ordered image pairs `n != m` and all categories.
pub fn contrastive_batch_loss(
    vectors: &[CategoryVectors],
    labels: &LabelMatrix,
    policy: PairPolicy,
) -> Result<ContrastiveLoss> {
    contrastive_batch(vectors, labels, policy, None)
}

/// Like [`contrastive_batch_loss`], also returning `d loss / d vectors`.
pub fn contrastive_batch_loss_grad(
    vectors: &[CategoryVectors],
    labels: &LabelMatrix,
    policy: PairPolicy,
) -> Result<(ContrastiveLoss, Vec<Vec<f64>>)> {
    let mut grads: Vec<Vec<f64>> = vectors.iter().map(|v| vec![0.0; v.data.len()]).collect();
    let out = contrastive_batch(vectors, labels, policy, Some(&mut grads))?;
    Ok((out, grads))
}

fn contrastive_batch(
    vectors: &[CategoryVectors],
    labels: &LabelMatrix,
    policy: PairPolicy,
    grads: Option<&mut Vec<Vec<f64>>>,
) -> Result<ContrastiveLoss> {
    let n = vectors.len();
    check_len("contrastive labels", n, labels.rows())?;
    if n < 2 {
        return Ok(ContrastiveLoss {
            loss: 0.0,
            terms: 0,
            degenerate_pairs: 0,
            undersized: true,
        });
    }
    let (c_n, d) = (vectors[0].categories, vectors[0].dim);
    check_len("contrastive categories", c_n, labels.categories())?;
    for v in vectors {
        check_len("contrastive vector shape", c_n * d, v.data.len())?;
    }
    let norms: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| (0..c_n).map(|c| norm(v.row(c))).collect())
        .collect();
    let mut total = 0.0;
    let mut terms = 0usize;
    let mut degenerate = 0usize;
    // (n, m, c, sign) for the gradient pass
    let mut active: Vec<(usize, usize, usize, f64, f64)> = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            for c in 0..c_n {
                let (ya, yb) = (labels.get(a, c), labels.get(b, c));
                if policy == PairPolicy::KnownOnly && (ya == 0.0 || yb == 0.0) {
                    continue;
                }
                let both = ya == 1.0 && yb == 1.0;
                let (na, nb) = (norms[a][c], norms[b][c]);
                terms += 1;
                if na == 0.0 || nb == 0.0 {
                    degenerate += 1;
                    total += 1.0;
                    continue;
                }
                let cos = dot(vectors[a].row(c), vectors[b].row(c)) / (na * nb);
                let sign = if both { -1.0 } else { 1.0 };
                total += 1.0 + sign * cos;
                if grads.is_some() {
                    active.push((a, b, c, sign, cos));
                }
            }
        }
    }
    if terms == 0 {
        return Ok(ContrastiveLoss {
            loss: 0.0,
            terms,
            degenerate_pairs: degenerate,
            undersized: false,
        });
    }
    let scale = 1.0 / terms as f64;
    if let Some(g) = grads {
        for (a, b, c, sign, cos) in active {
            let (na, nb) = (norms[a][c], norms[b][c]);
            let (u, v) = (vectors[a].row(c), vectors[b].row(c));
            let k = sign * scale;
            let (ga, gb) = if a < b {
                let (lo, hi) = g.split_at_mut(b);
                (&mut lo[a][c * d..(c + 1) * d], &mut hi[0][c * d..(c + 1) * d])
            } else {
                let (lo, hi) = g.split_at_mut(a);
                (&mut hi[0][c * d..(c + 1) * d], &mut lo[b][c * d..(c + 1) * d])
            };
            for i in 0..d {
                ga[i] += k * (v[i] / (na * nb) - cos * u[i] / (na * na));
                gb[i] += k * (u[i] / (na * nb) - cos * v[i] / (nb * nb));
            }
        }
    }
    Ok(ContrastiveLoss {
        loss: total * scale,
        terms,
        degenerate_pairs: degenerate,
        undersized: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_2x2() -> GlobalFeatureMap {
        GlobalFeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn zero_transform_gives_uniform_attention() {
        let f = GlobalFeatureMap::new(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 2.0]).unwrap();
        let mut rng = crate::rng::stream(1, crate::rng::Stream::Init);
        let e = CategoryEmbeddings::random(3, 4, 1, &mut rng);
        let dec = SemanticDecoupler::zeros(2, 4, 5, 2, 2);
        let out = decouple(&f, &e, &dec).unwrap();
        for c in 0..3 {
            for (x, y) in out.category(c).iter().zip(&f.data) {
                assert!((x - y / 4.0).abs() < 1e-15);
            }
        }
        let v = pool(&out, Pooling::Sum);
        assert!((v.row(0)[0] - 2.5).abs() < 1e-15);
        assert!((v.row(2)[1] - 0.375).abs() < 1e-15);
    }

    #[test]
    fn peaked_logits_select_one_cell() {
        let f = map_2x2();
        let out = decouple_from_logits(&f, 1, &[0.0, 0.0, 60.0, 0.0]).unwrap();
        assert!((out.maps[2] - 3.0).abs() < 1e-12);
        assert!(out.maps[0].abs() < 1e-12 && out.maps[3].abs() < 1e-12);
    }

    #[test]
    fn hand_set_logits_two_categories() {
        // category 0: logits (0, ln 3, 0, 0) -> weights (1/6, 1/2, 1/6, 1/6)
        // category 1: logits (ln 2, 0, 0, ln 2) -> weights (1/3, 1/6, 1/6, 1/3)
        let ln3 = libm::log(3.0);
        let ln2 = libm::log(2.0);
        let f = map_2x2();
        let out = decouple_from_logits(&f, 2, &[0.0, ln3, 0.0, 0.0, ln2, 0.0, 0.0, ln2]).unwrap();
        let want0 = [1.0 / 6.0, 1.0, 0.5, 4.0 / 6.0];
        let want1 = [1.0 / 3.0, 2.0 / 6.0, 3.0 / 6.0, 4.0 / 3.0];
        for i in 0..4 {
            assert!((out.category(0)[i] - want0[i]).abs() < 1e-12);
            assert!((out.category(1)[i] - want1[i]).abs() < 1e-12);
        }
        let v = pool(&out, Pooling::Sum);
        assert!((v.row(0)[0] - (1.0 / 6.0 + 1.0 + 0.5 + 4.0 / 6.0)).abs() < 1e-12);
        assert!((v.row(1)[0] - (1.0 / 3.0 + 1.0 / 3.0 + 0.5 + 4.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn decouple_rejects_wrong_shape() {
        let f = map_2x2();
        let mut rng = crate::rng::stream(1, crate::rng::Stream::Init);
        let e = CategoryEmbeddings::random(2, 3, 1, &mut rng);
        let dec = SemanticDecoupler::zeros(4, 3, 2, 2, 2);
        assert!(matches!(decouple(&f, &e, &dec), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn pooling_variants() {
        let f = map_2x2();
        let out = decouple_from_logits(&f, 1, &[0.0; 4]).unwrap();
        assert_eq!(pool(&out, Pooling::Sum).data, vec![2.5]);
        assert_eq!(pool(&out, Pooling::Mean).data, vec![0.625]);
        assert_eq!(pool(&out, Pooling::Max).data, vec![1.0]);
        let zero = CategoryFeatureMaps { maps: vec![0.0; 4], ..out };
        assert_eq!(pool(&zero, Pooling::Sum).data, vec![0.0]);
    }

    #[test]
    fn pair_loss_cases() {
        assert_eq!(contrastive_pair_loss(&[1.0, 0.0], &[1.0, 0.0], true).loss, 0.0);
        assert_eq!(contrastive_pair_loss(&[1.0, 0.0], &[1.0, 0.0], false).loss, 2.0);
        assert_eq!(contrastive_pair_loss(&[1.0, 0.0], &[0.0, 1.0], true).loss, 1.0);
        let z = contrastive_pair_loss(&[0.0, 0.0], &[0.0, 1.0], true);
        assert_eq!(z.loss, 1.0);
        assert!(z.degenerate);
    }

    #[test]
    fn batch_loss_identical_images() {
        let v = CategoryVectors::new(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let batch = [v.clone(), v];
        let pos = LabelMatrix::from_hard(2, 2, vec![1.0; 4]).unwrap();
        let neg = LabelMatrix::from_hard(2, 2, vec![-1.0; 4]).unwrap();
        let l = contrastive_batch_loss(&batch, &pos, PairPolicy::Literal).unwrap();
        assert!(l.loss.abs() < 1e-12);
        assert_eq!(l.terms, 4);
        let l = contrastive_batch_loss(&batch, &neg, PairPolicy::Literal).unwrap();
        assert!((l.loss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_is_zero() {
        let v = CategoryVectors::new(1, 2, vec![1.0, 2.0]).unwrap();
        let y = LabelMatrix::from_hard(1, 1, vec![1.0]).unwrap();
        let l = contrastive_batch_loss(&[v], &y, PairPolicy::Literal).unwrap();
        assert_eq!(l.loss, 0.0);
        assert!(l.undersized);
    }

    #[test]
    fn known_only_policy_skips_unknown_pairs() {
        let v = CategoryVectors::new(1, 2, vec![1.0, 0.0]).unwrap();
        let w = CategoryVectors::new(1, 2, vec![0.0, 1.0]).unwrap();
        let y = LabelMatrix::from_hard(2, 1, vec![1.0, 0.0]).unwrap();
        let l = contrastive_batch_loss(&[v, w], &y, PairPolicy::KnownOnly).unwrap();
        assert_eq!(l.terms, 0);
        assert_eq!(l.loss, 0.0);
    }
}
