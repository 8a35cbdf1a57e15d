//! Prototype-perspective representation blending.
//!
//! Positive category maps are grouped into `4^K` spatial bins by the location
//! of their channel-max peak and averaged into prototypes. An image's unknown
//! category is then mixed with the prototype of a bin other than its own.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::csrl::CategoryFeatureMaps;
use crate::error::{check_len, Error, Result};
use crate::iprb::BlendCoefficients;
use crate::labelspace::LabelMatrix;
use crate::linalg::dot;

/// Ratios used on the prototype path.
pub type BlendCoefficientsB = BlendCoefficients;

/// Largest supported bin exponent.
pub const MAX_BIN_EXPONENT: u32 = 3;

/// Spatial bin of a single `D x H x W` category map.
///
/// Channels are reduced by max, the first row-major argmax picks the peak,
/// and the peak falls into one cell of a `2^K x 2^K` grid.
pub fn assign_bin(map: &[f64], channels: usize, height: usize, width: usize, k: u32) -> usize {
    let hw = height * width;
    debug_assert_eq!(map.len(), channels * hw);
    let side = 1usize << k;
    if side == 1 || hw == 0 {
        return 0;
    }
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for i in 0..hw {
        let mut s = f64::NEG_INFINITY;
        for d in 0..channels {
            s = s.max(map[d * hw + i]);
        }
        if s > best_val {
            best_val = s;
            best = i;
        }
    }
    let (h, w) = (best / width, best % width);
    (h * side / height) * side + (w * side / width)
}

/// Per-category, per-bin averaged positive maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub categories: usize,
    pub k: u32,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `C x 4^K x D x H x W`
    pub prototypes: Vec<f64>,
    /// `C x 4^K`
    pub occupancy: Vec<u32>,
    pub backfilled: Vec<bool>,
    pub usable: Vec<bool>,
    /// `C x D x H x W`, mean of every gathered map per category.
    pub category_means: Vec<f64>,
    pub built_at_epoch: u32,
}

impl PrototypeBank {
    pub fn bins(&self) -> usize {
        1 << (2 * self.k)
    }

    pub fn map_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn prototype(&self, c: usize, bin: usize) -> &[f64] {
        let len = self.map_len();
        let i = c * self.bins() + bin;
        &self.prototypes[i * len..(i + 1) * len]
    }

    pub fn category_mean(&self, c: usize) -> &[f64] {
        let len = self.map_len();
        &self.category_means[c * len..(c + 1) * len]
    }

    pub fn is_usable(&self, c: usize, bin: usize) -> bool {
        self.usable[c * self.bins() + bin]
    }

    pub fn has_usable_category(&self) -> bool {
        self.usable.iter().any(|&u| u)
    }
}

/// Streaming builder so a dataset pass never holds every map at once.
#[derive(Debug, Clone)]
pub struct PrototypeAccumulator {
    categories: usize,
    k: u32,
    channels: usize,
    height: usize,
    width: usize,
    sums: Vec<f64>,
    counts: Vec<u32>,
}

impl PrototypeAccumulator {
    pub fn new(categories: usize, k: u32, channels: usize, height: usize, width: usize) -> Result<Self> {
        if k > MAX_BIN_EXPONENT {
            return Err(Error::InvalidConfig(alloc::format!(
                "bin exponent {k} exceeds {MAX_BIN_EXPONENT}"
            )));
        }
        let bins = 1usize << (2 * k);
        Ok(Self {
            categories,
            k,
            channels,
            height,
            width,
            sums: vec![0.0; categories * bins * channels * height * width],
            counts: vec![0; categories * bins],
        })
    }

    fn bins(&self) -> usize {
        1 << (2 * self.k)
    }

    /// Adds one positive map of category `c`.
    pub fn add(&mut self, c: usize, map: &[f64]) -> usize {
        let len = self.channels * self.height * self.width;
        debug_assert_eq!(map.len(), len);
        let bin = assign_bin(map, self.channels, self.height, self.width, self.k);
        let i = c * self.bins() + bin;
        for (s, &x) in self.sums[i * len..(i + 1) * len].iter_mut().zip(map) {
            *s += x;
        }
        self.counts[i] += 1;
        bin
    }

    /// Adds every category of an image whose label is positive.
    pub fn add_image(&mut self, fmaps: &CategoryFeatureMaps, labels: &[f64]) {
        for c in 0..self.categories {
            if labels[c] == 1.0 {
                self.add(c, fmaps.category(c));
            }
        }
    }

    pub fn finish(self, built_at_epoch: u32) -> PrototypeBank {
        let bins = self.bins();
        let len = self.channels * self.height * self.width;
        let mut prototypes = self.sums;
        let mut category_means = vec![0.0; self.categories * len];
        let mut backfilled = vec![false; self.categories * bins];
        let mut usable = vec![false; self.categories * bins];
        for c in 0..self.categories {
            let total: u32 = self.counts[c * bins..(c + 1) * bins].iter().sum();
            if total == 0 {
                continue;
            }
            let mean = &mut category_means[c * len..(c + 1) * len];
            for b in 0..bins {
                let i = c * bins + b;
                for (m, &s) in mean.iter_mut().zip(&prototypes[i * len..(i + 1) * len]) {
                    *m += s;
                }
            }
            mean.iter_mut().for_each(|m| *m /= total as f64);
            for b in 0..bins {
                let i = c * bins + b;
                let slot = &mut prototypes[i * len..(i + 1) * len];
                let n = self.counts[i];
                if n > 0 {
                    slot.iter_mut().for_each(|x| *x /= n as f64);
                } else {
                    slot.copy_from_slice(mean);
                    backfilled[i] = true;
                }
                usable[i] = true;
            }
        }
        PrototypeBank {
            categories: self.categories,
            k: self.k,
            channels: self.channels,
            height: self.height,
            width: self.width,
            prototypes,
            occupancy: self.counts,
            backfilled,
            usable,
            category_means,
            built_at_epoch,
        }
    }
}

/// Builds the bank from every image's maps and (partial) labels.
///
/// Only maps with a known positive label contribute. Empty bins are filled
/// with the category mean and flagged; categories without positives are
/// unusable.
pub fn build_prototypes(
    features: &[CategoryFeatureMaps],
    labels: &LabelMatrix,
    k: u32,
    built_at_epoch: u32,
) -> Result<PrototypeBank> {
    check_len("prototype labels", features.len(), labels.rows())?;
    let first = features.first().ok_or(Error::Empty("no feature maps for prototypes"))?;
    check_len("prototype categories", labels.categories(), first.categories)?;
    let mut acc = PrototypeAccumulator::new(first.categories, k, first.channels, first.height, first.width)?;
    for (n, f) in features.iter().enumerate() {
        check_len("prototype map size", first.maps.len(), f.maps.len())?;
        acc.add_image(f, labels.row(n));
    }
    Ok(acc.finish(built_at_epoch))
}

/// Category and bin chosen for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrototypeDraw {
    pub category: usize,
    pub bin: usize,
    pub self_bin: usize,
}

/// Picks one unknown category uniformly among those with a usable bin other
/// than the image's own, then one such bin uniformly.
pub fn draw_prototype<R: Rng + ?Sized>(
    f_n: &CategoryFeatureMaps,
    y_n: &[f64],
    bank: &PrototypeBank,
    rng: &mut R,
) -> Option<PrototypeDraw> {
    let bins = bank.bins();
    let mut eligible: Vec<(usize, usize)> = Vec::new();
    for c in 0..f_n.categories {
        if y_n[c] != 0.0 {
            continue;
        }
        let self_bin = assign_bin(f_n.category(c), f_n.channels, f_n.height, f_n.width, bank.k);
        if (0..bins).any(|b| b != self_bin && bank.is_usable(c, b)) {
            eligible.push((c, self_bin));
        }
    }
    if eligible.is_empty() {
        return None;
    }
    let (category, self_bin) = eligible[rng.gen_range(0..eligible.len())];
    let candidates: Vec<usize> = (0..bins)
        .filter(|&b| b != self_bin && bank.is_usable(category, b))
        .collect();
    let bin = candidates[rng.gen_range(0..candidates.len())];
    Some(PrototypeDraw {
        category,
        bin,
        self_bin,
    })
}

#[derive(Debug, Clone)]
pub struct PrototypeBlend {
    pub maps: CategoryFeatureMaps,
    pub labels: Vec<f64>,
    pub draw: Option<PrototypeDraw>,
}

fn check_bank(f_n: &CategoryFeatureMaps, y_n: &[f64], bank: &PrototypeBank, b: &BlendCoefficients) -> Result<()> {
    check_len("label row", f_n.categories, y_n.len())?;
    check_len("bank categories", f_n.categories, bank.categories)?;
    check_len("bank map size", f_n.map_len(), bank.map_len())?;
    check_len("blend coefficients", f_n.categories, b.categories())
}

/// Per-category form: draws a category and bin, then mixes that one map.
pub fn blend_prototype<R: Rng + ?Sized>(
    f_n: &CategoryFeatureMaps,
    y_n: &[f64],
    bank: &PrototypeBank,
    b: &BlendCoefficients,
    rng: &mut R,
) -> Result<PrototypeBlend> {
    check_bank(f_n, y_n, bank, b)?;
    let draw = draw_prototype(f_n, y_n, bank, rng);
    let mut maps = f_n.clone();
    let mut labels = y_n.to_vec();
    if let Some(d) = draw {
        let beta = b.effective(d.category);
        let proto = bank.prototype(d.category, d.bin);
        for (o, (&x, &p)) in maps
            .category_mut(d.category)
            .iter_mut()
            .zip(f_n.category(d.category).iter().zip(proto))
        {
            *o = beta * x + (1.0 - beta) * p;
        }
        labels[d.category] = 1.0 - beta;
    }
    Ok(PrototypeBlend { maps, labels, draw })
}

/// Per-category mixing weights: `beta_c` on the drawn category, 1 elsewhere.
pub fn prototype_mask(categories: usize, b: &BlendCoefficients, draw: Option<PrototypeDraw>) -> Vec<f64> {
    let mut mask = vec![1.0; categories];
    if let Some(d) = draw {
        mask[d.category] = b.effective(d.category);
    }
    mask
}

/// Matrix form `F~ = B F + (1 - B) P^k`, `y~ = B y + (1 - B)` for a given draw.
pub fn blend_prototype_masked(
    f_n: &CategoryFeatureMaps,
    y_n: &[f64],
    bank: &PrototypeBank,
    b: &BlendCoefficients,
    draw: Option<PrototypeDraw>,
) -> Result<PrototypeBlend> {
    check_bank(f_n, y_n, bank, b)?;
    let mask = prototype_mask(f_n.categories, b, draw);
    let len = f_n.map_len();
    let zeros = vec![0.0; len];
    let mut maps = f_n.zeros_like();
    maps.attention.copy_from_slice(&f_n.attention);
    for c in 0..f_n.categories {
        let proto = match draw {
            Some(d) if d.category == c => bank.prototype(c, d.bin),
            _ => &zeros,
        };
        let w = mask[c];
        for (o, (&x, &p)) in maps.maps[c * len..(c + 1) * len]
            .iter_mut()
            .zip(f_n.category(c).iter().zip(proto))
        {
            *o = w * x + (1.0 - w) * p;
        }
    }
    let labels = y_n.iter().zip(&mask).map(|(&y, &w)| w * y + (1.0 - w)).collect();
    Ok(PrototypeBlend { maps, labels, draw })
}

/// Backward through [`blend_prototype_masked`] for one image.
#[allow(clippy::too_many_arguments)]
pub(crate) fn blend_prototype_backward(
    f_n: &CategoryFeatureMaps,
    bank: &PrototypeBank,
    b: &BlendCoefficients,
    draw: Option<PrototypeDraw>,
    dblended: &[f64],
    dlabels: &[f64],
    dmaps: &mut [f64],
    draw_grad: &mut [f64],
) {
    let len = f_n.map_len();
    match draw {
        None => {
            for (d, &g) in dmaps.iter_mut().zip(dblended) {
                *d += g;
            }
        }
        Some(dr) => {
            let c = dr.category;
            let beta = b.effective(c);
            for (ci, (dst, g)) in dmaps.chunks_mut(len).zip(dblended.chunks(len)).enumerate() {
                let w = if ci == c { beta } else { 1.0 };
                for (d, &x) in dst.iter_mut().zip(g) {
                    *d += w * x;
                }
            }
            let g = &dblended[c * len..(c + 1) * len];
            let dbeta = dot(f_n.category(c), g) - dot(bank.prototype(c, dr.bin), g) - dlabels[c];
            draw_grad[c] += dbeta * beta * (1.0 - beta);
        }
    }
}
