//! Instance-perspective representation blending.
//!
//! Within a batch, image `n` is paired with image `N-1-n`. For every
//! category that is unknown in `n` but positive in its partner, the two
//! category maps are mixed with a learnable per-category ratio `alpha_c`
//! and the unknown label becomes the soft target `1 - alpha_c`.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::csrl::CategoryFeatureMaps;
use crate::error::{check_len, Result};
use crate::labelspace::LabelMatrix;
use crate::linalg::{dot, sigmoid};

/// Learnable per-category blend ratios, stored as logits so the effective
/// ratio always lies in `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendCoefficients {
    pub raw: Vec<f64>,
}

impl BlendCoefficients {
    /// All ratios start at 0.5.
    pub fn new(categories: usize) -> Self {
        Self {
            raw: vec![0.0; categories],
        }
    }

    pub fn from_effective(values: &[f64]) -> Self {
        Self {
            raw: values.iter().map(|&v| crate::linalg::logit(v)).collect(),
        }
    }

    pub fn effective(&self, c: usize) -> f64 {
        sigmoid(self.raw[c])
    }

    pub fn effective_all(&self) -> Vec<f64> {
        self.raw.iter().map(|&r| sigmoid(r)).collect()
    }

    pub fn mean_effective(&self) -> f64 {
        if self.raw.is_empty() {
            return 0.0;
        }
        self.raw.iter().map(|&r| sigmoid(r)).sum::<f64>() / self.raw.len() as f64
    }

    pub fn categories(&self) -> usize {
        self.raw.len()
    }
}

/// Ratios used on the instance path.
pub type BlendCoefficientsA = BlendCoefficients;

/// Row-major `N x C` mixing weights for an image and its partner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendMaskPair {
    pub rows: usize,
    pub cols: usize,
    pub m: Vec<f64>,
    pub flip_m: Vec<f64>,
}

impl BlendMaskPair {
    pub fn is_blended(&self, n: usize, c: usize) -> bool {
        self.flip_m[n * self.cols + c] != 0.0
    }
}

/// Entry `(n, c)` mixes iff `y[n, c] == 0` and `flip_y[n, c] == 1`.
pub fn build_blend_masks(y: &LabelMatrix, flip_y: &LabelMatrix, a: &BlendCoefficients) -> Result<BlendMaskPair> {
    check_len("flipped label rows", y.rows(), flip_y.rows())?;
    check_len("flipped label categories", y.categories(), flip_y.categories())?;
    check_len("blend coefficients", y.categories(), a.categories())?;
    let (rows, cols) = (y.rows(), y.categories());
    let mut m = vec![1.0; rows * cols];
    let mut flip_m = vec![0.0; rows * cols];
    let alpha = a.effective_all();
    for n in 0..rows {
        for c in 0..cols {
            if y.get(n, c) == 0.0 && flip_y.get(n, c) == 1.0 {
                m[n * cols + c] = alpha[c];
                flip_m[n * cols + c] = 1.0 - alpha[c];
            }
        }
    }
    Ok(BlendMaskPair { rows, cols, m, flip_m })
}

/// Batch-reversal pairing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    pub partners: Vec<usize>,
    /// Fewer than two images: nothing can be blended.
    pub undersized: bool,
}

pub fn pair_batch(batch: usize) -> Pairing {
    Pairing {
        partners: (0..batch).rev().collect(),
        undersized: batch < 2,
    }
}

fn check_maps(a: &CategoryFeatureMaps, b: &CategoryFeatureMaps) -> Result<()> {
    check_len("paired categories", a.categories, b.categories)?;
    check_len("paired map size", a.maps.len(), b.maps.len())?;
    check_len("paired attention size", a.attention.len(), b.attention.len())
}

/// Per-category blend of one image with its partner.
pub fn blend_instance(
    f_n: &CategoryFeatureMaps,
    f_m: &CategoryFeatureMaps,
    y_n: &[f64],
    y_m: &[f64],
    a: &BlendCoefficients,
) -> Result<(CategoryFeatureMaps, Vec<f64>)> {
    check_maps(f_n, f_m)?;
    check_len("label row", f_n.categories, y_n.len())?;
    check_len("partner label row", f_n.categories, y_m.len())?;
    check_len("blend coefficients", f_n.categories, a.categories())?;
    let mut out = f_n.clone();
    let mut labels = y_n.to_vec();
    let hw = f_n.spatial();
    for c in 0..f_n.categories {
        if y_n[c] == 0.0 && y_m[c] == 1.0 {
            let alpha = a.effective(c);
            for (o, (&x, &y)) in out.category_mut(c).iter_mut().zip(f_n.category(c).iter().zip(f_m.category(c))) {
                *o = alpha * x + (1.0 - alpha) * y;
            }
            for i in c * hw..(c + 1) * hw {
                out.attention[i] = alpha * f_n.attention[i] + (1.0 - alpha) * f_m.attention[i];
            }
            labels[c] = 1.0 - alpha;
        }
    }
    Ok((out, labels))
}

/// Result of blending a whole batch in matrix form.
#[derive(Debug, Clone)]
pub struct InstanceBlend {
    pub maps: Vec<CategoryFeatureMaps>,
    pub labels: LabelMatrix,
    pub masks: BlendMaskPair,
    pub pairing: Pairing,
}

impl InstanceBlend {
    pub fn blended_entries(&self) -> usize {
        self.masks.flip_m.iter().filter(|&&x| x != 0.0).count()
    }
}

/// Matrix form: `F_hat = M * F + flip_M * flip(F)`, `y_hat = M * y + flip_M * flip(y)`.
pub fn blend_batch(maps: &[CategoryFeatureMaps], labels: &LabelMatrix, a: &BlendCoefficients) -> Result<InstanceBlend> {
    check_len("batch labels", maps.len(), labels.rows())?;
    let pairing = pair_batch(maps.len());
    let flip_y = labels.select_rows(&pairing.partners);
    let masks = build_blend_masks(labels, &flip_y, a)?;
    let cols = labels.categories();
    let mut out = Vec::with_capacity(maps.len());
    for (n, &partner) in pairing.partners.iter().enumerate() {
        let (f_n, f_m) = (&maps[n], &maps[partner]);
        check_maps(f_n, f_m)?;
        check_len("map categories", cols, f_n.categories)?;
        let mut blended = f_n.zeros_like();
        let (len, hw) = (f_n.map_len(), f_n.spatial());
        for c in 0..cols {
            let (wm, wf) = (masks.m[n * cols + c], masks.flip_m[n * cols + c]);
            let dst = &mut blended.maps[c * len..(c + 1) * len];
            for (o, (&x, &y)) in dst.iter_mut().zip(f_n.category(c).iter().zip(f_m.category(c))) {
                *o = wm * x + wf * y;
            }
            for i in c * hw..(c + 1) * hw {
                blended.attention[i] = wm * f_n.attention[i] + wf * f_m.attention[i];
            }
        }
        out.push(blended);
    }
    let values = labels
        .values()
        .iter()
        .zip(flip_y.values())
        .zip(masks.m.iter().zip(&masks.flip_m))
        .map(|((&y, &fy), (&wm, &wf))| wm * y + wf * fy)
        .collect();
    Ok(InstanceBlend {
        maps: out,
        labels: LabelMatrix::from_blended(labels.rows(), cols, values),
        masks,
        pairing,
    })
}

impl InstanceBlend {
    /// Backward through [`blend_batch`].
    ///
    /// `dblended[n]` is `d loss / d F_hat_n` and `dlabels` is
    /// `d loss / d y_hat` (`N x C`). Map gradients are accumulated into
    /// `dmaps`, ratio-logit gradients into `draw`.
    pub(crate) fn backward(
        &self,
        maps: &[CategoryFeatureMaps],
        a: &BlendCoefficients,
        dblended: &[Vec<f64>],
        dlabels: &[f64],
        dmaps: &mut [Vec<f64>],
        draw: &mut [f64],
    ) {
        let cols = self.masks.cols;
        let mut dalpha = vec![0.0; cols];
        for (n, &partner) in self.pairing.partners.iter().enumerate() {
            let len = maps[n].map_len();
            for c in 0..cols {
                let (wm, wf) = (self.masks.m[n * cols + c], self.masks.flip_m[n * cols + c]);
                let g = &dblended[n][c * len..(c + 1) * len];
                if wf == 0.0 {
                    for (d, &x) in dmaps[n][c * len..(c + 1) * len].iter_mut().zip(g) {
                        *d += x;
                    }
                    continue;
                }
                for (d, &x) in dmaps[n][c * len..(c + 1) * len].iter_mut().zip(g) {
                    *d += wm * x;
                }
                for (d, &x) in dmaps[partner][c * len..(c + 1) * len].iter_mut().zip(g) {
                    *d += wf * x;
                }
                let (f_n, f_m) = (maps[n].category(c), maps[partner].category(c));
                dalpha[c] += dot(f_n, g) - dot(f_m, g) - dlabels[n * cols + c];
            }
        }
        for c in 0..cols {
            let alpha = a.effective(c);
            draw[c] += dalpha[c] * alpha * (1.0 - alpha);
        }
    }
}
