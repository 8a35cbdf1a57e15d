//! Gated label propagation, per-category classifiers and the training losses.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::labelspace::LabelMatrix;
use crate::linalg::{gemm, sigmoid};
use crate::rng::normal;

const ROW_SUM_TOL: f64 = 1e-6;
/// Scores are clamped this far from 0 and 1 before taking logs.
pub const SCORE_EPS: f64 = 1e-7;

/// Row-stochastic `C x C` propagation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adjacency {
    categories: usize,
    data: Vec<f64>,
}

impl Adjacency {
    pub fn new(categories: usize, data: Vec<f64>) -> Result<Self> {
        check_len("adjacency", categories * categories, data.len())?;
        for (row, r) in data.chunks(categories.max(1)).enumerate() {
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL || r.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(Error::NotRowStochastic { row, sum });
            }
        }
        Ok(Self { categories, data })
    }

    /// `1 / C` everywhere, self included.
    pub fn uniform(categories: usize) -> Self {
        Self {
            categories,
            data: vec![1.0 / categories as f64; categories * categories],
        }
    }

    pub fn identity(categories: usize) -> Self {
        let mut data = vec![0.0; categories * categories];
        for c in 0..categories {
            data[c * categories + c] = 1.0;
        }
        Self { categories, data }
    }

    /// Row-normalized co-occurrence of known positives (self included).
    /// Rows without any positive fall back to uniform.
    pub fn from_cooccurrence(labels: &LabelMatrix) -> Self {
        let c_n = labels.categories();
        let mut data = vec![0.0; c_n * c_n];
        for n in 0..labels.rows() {
            let row = labels.row(n);
            for a in 0..c_n {
                if row[a] != 1.0 {
                    continue;
                }
                for b in 0..c_n {
                    if row[b] == 1.0 {
                        data[a * c_n + b] += 1.0;
                    }
                }
            }
        }
        for r in data.chunks_mut(c_n) {
            let sum: f64 = r.iter().sum();
            if sum == 0.0 {
                r.iter_mut().for_each(|x| *x = 1.0 / c_n as f64);
            } else {
                r.iter_mut().for_each(|x| *x /= sum);
            }
        }
        Self { categories: c_n, data }
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Trainable parameters of the gated propagation and the classifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub categories: usize,
    pub dim: usize,
    pub update_msg: Vec<f64>,
    pub update_state: Vec<f64>,
    pub update_bias: Vec<f64>,
    pub reset_msg: Vec<f64>,
    pub reset_state: Vec<f64>,
    pub reset_bias: Vec<f64>,
    pub cand_msg: Vec<f64>,
    pub cand_state: Vec<f64>,
    pub cand_bias: Vec<f64>,
    /// `C x D`, one linear classifier per category.
    pub classifier_w: Vec<f64>,
    pub classifier_b: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(categories: usize, dim: usize) -> Self {
        let sq = vec![0.0; dim * dim];
        Self {
            categories,
            dim,
            update_msg: sq.clone(),
            update_state: sq.clone(),
            update_bias: vec![0.0; dim],
            reset_msg: sq.clone(),
            reset_state: sq.clone(),
            reset_bias: vec![0.0; dim],
            cand_msg: sq.clone(),
            cand_state: sq,
            cand_bias: vec![0.0; dim],
            classifier_w: vec![0.0; categories * dim],
            classifier_b: vec![0.0; categories],
        }
    }

    pub fn random<R: Rng + ?Sized>(categories: usize, dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(categories, dim);
        let s = 1.0 / libm::sqrt(dim as f64);
        for m in [
            &mut p.update_msg,
            &mut p.update_state,
            &mut p.reset_msg,
            &mut p.reset_state,
            &mut p.cand_msg,
            &mut p.cand_state,
            &mut p.classifier_w,
        ] {
            m.iter_mut().for_each(|x| *x = normal(rng) * s);
        }
        p
    }

    pub(crate) fn slices(&self) -> [&[f64]; 11] {
        [
            &self.update_msg,
            &self.update_state,
            &self.update_bias,
            &self.reset_msg,
            &self.reset_state,
            &self.reset_bias,
            &self.cand_msg,
            &self.cand_state,
            &self.cand_bias,
            &self.classifier_w,
            &self.classifier_b,
        ]
    }

    pub(crate) fn slices_mut(&mut self) -> [&mut [f64]; 11] {
        [
            &mut self.update_msg,
            &mut self.update_state,
            &mut self.update_bias,
            &mut self.reset_msg,
            &mut self.reset_state,
            &mut self.reset_bias,
            &mut self.cand_msg,
            &mut self.cand_state,
            &mut self.cand_bias,
            &mut self.classifier_w,
            &mut self.classifier_b,
        ]
    }
}

/// Probability scores in `(0, 1)`, one per category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(pub Vec<f64>);

/// Gated message passing over the category graph followed by the classifiers.
///
/// Each step aggregates neighbour states through the adjacency, then updates
/// every node with reset/update gating. `steps = 0` classifies the pooled
/// vectors directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedHead {
    pub adjacency: Adjacency,
    pub steps: usize,
    pub params: HeadParams,
}

struct StepTape {
    h: Vec<f64>,
    m: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
}

/// Activations kept for the backward pass of a batch.
pub struct HeadTape {
    batch: usize,
    steps: Vec<StepTape>,
    last: Vec<f64>,
    pub scores: Vec<f64>,
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_mut(b.len()) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn col_sums(x: &[f64], dim: usize, out: &mut [f64]) {
    for row in x.chunks(dim) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

impl GatedHead {
    pub fn new(adjacency: Adjacency, steps: usize, params: HeadParams) -> Result<Self> {
        check_len("adjacency categories", params.categories, adjacency.categories())?;
        Ok(Self {
            adjacency,
            steps,
            params,
        })
    }

    fn aggregate(&self, h: &[f64], batch: usize, out: &mut [f64], transpose: bool, beta: f64) {
        let (c, d) = (self.params.categories, self.params.dim);
        for n in 0..batch {
            let r = n * c * d..(n + 1) * c * d;
            gemm(c, c, d, self.adjacency.as_slice(), transpose, &h[r.clone()], false, beta, &mut out[r]);
        }
    }

    /// Forward pass over `batch` stacked `C x D` vector sets.
    pub fn forward_batch(&self, vectors: &[f64], batch: usize) -> HeadTape {
        let p = &self.params;
        let (c, d) = (p.categories, p.dim);
        let rows = batch * c;
        assert_eq!(vectors.len(), rows * d);
        let mut h = vectors.to_vec();
        let mut steps = Vec::with_capacity(self.steps);
        for _ in 0..self.steps {
            let mut m = vec![0.0; rows * d];
            self.aggregate(&h, batch, &mut m, false, 0.0);
            let gate = |w_msg: &[f64], w_state: &[f64], bias: &[f64], state: &[f64]| {
                let mut pre = vec![0.0; rows * d];
                gemm(rows, d, d, &m, false, w_msg, true, 0.0, &mut pre);
                gemm(rows, d, d, state, false, w_state, true, 1.0, &mut pre);
                add_bias(&mut pre, bias);
                pre
            };
            let mut z = gate(&p.update_msg, &p.update_state, &p.update_bias, &h);
            z.iter_mut().for_each(|x| *x = sigmoid(*x));
            let mut r = gate(&p.reset_msg, &p.reset_state, &p.reset_bias, &h);
            r.iter_mut().for_each(|x| *x = sigmoid(*x));
            let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
            let mut cand = gate(&p.cand_msg, &p.cand_state, &p.cand_bias, &rh);
            cand.iter_mut().for_each(|x| *x = libm::tanh(*x));
            let next: Vec<f64> = h
                .iter()
                .zip(&z)
                .zip(&cand)
                .map(|((&hv, &zv), &cv)| (1.0 - zv) * hv + zv * cv)
                .collect();
            steps.push(StepTape { h, m, z, r, cand });
            h = next;
        }
        let mut scores = vec![0.0; rows];
        for (i, s) in scores.iter_mut().enumerate() {
            let cat = i % c;
            let logit = crate::linalg::dot(&h[i * d..(i + 1) * d], &p.classifier_w[cat * d..(cat + 1) * d])
                + p.classifier_b[cat];
            *s = sigmoid(logit);
        }
        HeadTape {
            batch,
            steps,
            last: h,
            scores,
        }
    }

    /// Backward pass: accumulates parameter gradients into `grad` and returns
    /// `d loss / d vectors`.
    pub fn backward_batch(&self, tape: &HeadTape, dlogits: &[f64], grad: &mut HeadParams) -> Vec<f64> {
        let p = &self.params;
        let (c, d) = (p.categories, p.dim);
        let rows = tape.batch * c;
        let mut dh = vec![0.0; rows * d];
        for i in 0..rows {
            let cat = i % c;
            let g = dlogits[i];
            if g == 0.0 {
                continue;
            }
            grad.classifier_b[cat] += g;
            for k in 0..d {
                grad.classifier_w[cat * d + k] += g * tape.last[i * d + k];
                dh[i * d + k] = g * p.classifier_w[cat * d + k];
            }
        }
        for st in tape.steps.iter().rev() {
            let n = rows * d;
            let mut dprev = vec![0.0; n];
            let mut dz = vec![0.0; n];
            let mut dpre_c = vec![0.0; n];
            for i in 0..n {
                let g = dh[i];
                dz[i] = g * (st.cand[i] - st.h[i]);
                dprev[i] = g * (1.0 - st.z[i]);
                dpre_c[i] = g * st.z[i] * (1.0 - st.cand[i] * st.cand[i]);
            }
            let mut dm = vec![0.0; n];
            let rh: Vec<f64> = st.r.iter().zip(&st.h).map(|(a, b)| a * b).collect();
            // candidate
            gemm(d, rows, d, &dpre_c, true, &st.m, false, 1.0, &mut grad.cand_msg);
            gemm(d, rows, d, &dpre_c, true, &rh, false, 1.0, &mut grad.cand_state);
            col_sums(&dpre_c, d, &mut grad.cand_bias);
            gemm(rows, d, d, &dpre_c, false, &p.cand_msg, false, 1.0, &mut dm);
            let mut drh = vec![0.0; n];
            gemm(rows, d, d, &dpre_c, false, &p.cand_state, false, 0.0, &mut drh);
            let mut dpre_r = vec![0.0; n];
            for i in 0..n {
                dprev[i] += drh[i] * st.r[i];
                dpre_r[i] = drh[i] * st.h[i] * st.r[i] * (1.0 - st.r[i]);
            }
            let mut dpre_z = dz;
            for i in 0..n {
                dpre_z[i] *= st.z[i] * (1.0 - st.z[i]);
            }
            for (dpre, w_msg, w_state, g_msg, g_state, g_bias) in [
                (
                    &dpre_z,
                    &p.update_msg,
                    &p.update_state,
                    &mut grad.update_msg,
                    &mut grad.update_state,
                    &mut grad.update_bias,
                ),
                (
                    &dpre_r,
                    &p.reset_msg,
                    &p.reset_state,
                    &mut grad.reset_msg,
                    &mut grad.reset_state,
                    &mut grad.reset_bias,
                ),
            ] {
                gemm(d, rows, d, dpre, true, &st.m, false, 1.0, g_msg);
                gemm(d, rows, d, dpre, true, &st.h, false, 1.0, g_state);
                col_sums(dpre, d, g_bias);
                gemm(rows, d, d, dpre, false, w_msg, false, 1.0, &mut dm);
                gemm(rows, d, d, dpre, false, w_state, false, 1.0, &mut dprev);
            }
            self.aggregate(&dm, tape.batch, &mut dprev, true, 1.0);
            dh = dprev;
        }
        dh
    }
}

/// Scores for one image's category vectors.
pub fn classify(v: &crate::csrl::CategoryVectors, head: &GatedHead) -> Result<ScoreVector> {
    check_len("classifier categories", head.params.categories, v.categories)?;
    check_len("classifier dim", head.params.dim, v.dim)?;
    Ok(ScoreVector(head.forward_batch(&v.data, 1).scores))
}

/// Target and weight of one label entry.
///
/// Hard positives and negatives have weight 1, unknowns weight 0, and a soft
/// blended value `y` is both the target and the weight.
#[inline]
pub fn target_weight(y: f64) -> (f64, f64) {
    if y == 1.0 {
        (1.0, 1.0)
    } else if y == -1.0 {
        (0.0, 1.0)
    } else if y > 0.0 && y < 1.0 {
        (y, y)
    } else {
        (0.0, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bce {
    pub loss: f64,
    /// Total label weight; zero means nothing was known.
    pub weight: f64,
}

fn entry_log_likelihood(t: f64, s: f64) -> f64 {
    let s = s.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
    t * libm::log(s) + (1.0 - t) * libm::log(1.0 - s)
}

/// Partial binary cross-entropy: weighted negative log-likelihood over
/// known and soft entries, normalized by their total weight.
pub fn partial_bce(y: &[f64], s: &[f64]) -> Bce {
    debug_assert_eq!(y.len(), s.len());
    let mut sum = 0.0;
    let mut weight = 0.0;
    for (&yc, &sc) in y.iter().zip(s) {
        let (t, w) = target_weight(yc);
        if w == 0.0 {
            continue;
        }
        sum += w * entry_log_likelihood(t, sc);
        weight += w;
    }
    if weight == 0.0 {
        return Bce { loss: 0.0, weight };
    }
    Bce {
        loss: -sum / weight,
        weight,
    }
}

/// [`partial_bce`] with gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BceGrad {
    pub bce: Bce,
    /// `d loss / d logit` per category.
    pub dlogits: Vec<f64>,
    /// `d loss / d y` on soft entries, zero on hard ones.
    pub dlabels: Vec<f64>,
}

pub fn partial_bce_grad(y: &[f64], s: &[f64]) -> BceGrad {
    let bce = partial_bce(y, s);
    let mut dlogits = vec![0.0; y.len()];
    let mut dlabels = vec![0.0; y.len()];
    if bce.weight > 0.0 {
        for c in 0..y.len() {
            let (t, w) = target_weight(y[c]);
            if w == 0.0 {
                continue;
            }
            dlogits[c] = w / bce.weight * (s[c] - t);
            if w != 1.0 {
                let sc = s[c].clamp(SCORE_EPS, 1.0 - SCORE_EPS);
                let ll = entry_log_likelihood(t, s[c]);
                let dll_dt = libm::log(sc) - libm::log(1.0 - sc);
                dlabels[c] = -(ll + t * dll_dt) / bce.weight - bce.loss / bce.weight;
            }
        }
    }
    BceGrad { bce, dlogits, dlabels }
}

/// Labels and scores of one path for one image.
#[derive(Debug, Clone, Copy)]
pub struct PathScores<'a> {
    pub labels: &'a [f64],
    pub scores: &'a [f64],
}

/// The clean path and, when active, the two blended paths of one image.
#[derive(Debug, Clone, Copy)]
pub struct SampleTerms<'a> {
    pub clean: PathScores<'a>,
    pub instance: Option<PathScores<'a>>,
    pub prototype: Option<PathScores<'a>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassificationLoss {
    pub clean: f64,
    pub instance: f64,
    pub prototype: f64,
}

impl ClassificationLoss {
    pub fn total(&self) -> f64 {
        self.clean + self.instance + self.prototype
    }
}

/// Equal-weight sum of the three partial-BCE terms over all samples.
pub fn classification_loss(samples: &[SampleTerms<'_>]) -> ClassificationLoss {
    let mut out = ClassificationLoss::default();
    for s in samples {
        out.clean += partial_bce(s.clean.labels, s.clean.scores).loss;
        if let Some(p) = s.instance {
            out.instance += partial_bce(p.labels, p.scores).loss;
        }
        if let Some(p) = s.prototype {
            out.prototype += partial_bce(p.labels, p.scores).loss;
        }
    }
    out
}

/// Loss weighting and blending schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the contrastive term.
    pub lambda: f64,
    /// First (1-based) epoch whose loss includes the blended paths.
    pub blend_start_epoch: u32,
    /// Epochs between prototype rebuilds.
    pub prototype_refresh_period: u32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            blend_start_epoch: 5,
            prototype_refresh_period: 5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(alloc::format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.prototype_refresh_period == 0 {
            return Err(Error::InvalidConfig("prototype refresh period must be positive".into()));
        }
        Ok(())
    }
}

pub fn total_loss(cls: f64, cst: f64, cfg: &LossConfig) -> f64 {
    cls + cfg.lambda * cst
}
