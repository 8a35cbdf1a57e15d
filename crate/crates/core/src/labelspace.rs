//! Partial-label data model and the label-dropping protocol.

use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// `N x C` label matrix.
///
/// Hard labels are `1` (positive), `-1` (negative) and `0` (unknown). Soft
/// values in `(0, 1)` only appear in matrices produced by blending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl LabelMatrix {
    /// Builds a matrix of hard labels, rejecting anything outside `{-1, 0, 1}`.
    pub fn from_hard(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        check_len("label matrix", rows * cols, values.len())?;
        if cols == 0 {
            return Err(Error::Empty("label matrix has no categories"));
        }
        for (i, &v) in values.iter().enumerate() {
            if v != -1.0 && v != 0.0 && v != 1.0 {
                return Err(Error::InvalidLabel {
                    row: i / cols,
                    col: i % cols,
                    value: v,
                });
            }
        }
        Ok(Self { rows, cols, values })
    }

    /// Builds a matrix from label rows of equal length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len("label row", cols, r.len())?;
            values.extend_from_slice(r);
        }
        Self::from_hard(rows.len(), cols, values)
    }

    /// Matrix holding blended rows; entries must lie in `[-1, 1]`.
    pub(crate) fn from_blended(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), rows * cols);
        debug_assert!(values.iter().all(|v| (-1.0..=1.0).contains(v)));
        Self { rows, cols, values }
    }

    pub fn unknown(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: alloc::vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn categories(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_known(&self, row: usize, col: usize) -> bool {
        self.get(row, col) != 0.0
    }

    pub fn known_mask(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v != 0.0).collect()
    }

    /// True when every entry is a known hard label.
    pub fn is_complete(&self) -> bool {
        self.values.iter().all(|&v| v == 1.0 || v == -1.0)
    }

    /// Subset of rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut values = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            values,
        }
    }
}

/// How the per-image number of kept labels is derived from the proportion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Rounding {
    /// Exactly `round(p * C)` labels per image.
    #[default]
    PerImageExact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProportionSpec {
    pub proportion: f64,
    pub seed: u64,
    pub rounding: Rounding,
}

impl ProportionSpec {
    pub fn new(proportion: f64, seed: u64) -> Result<Self> {
        if !(proportion > 0.0 && proportion <= 1.0) {
            return Err(Error::InvalidProportion(proportion));
        }
        Ok(Self {
            proportion,
            seed,
            rounding: Rounding::PerImageExact,
        })
    }

    /// Labels kept per image for `categories` categories.
    pub fn kept_per_image(&self, categories: usize) -> usize {
        match self.rounding {
            Rounding::PerImageExact => libm::round(self.proportion * categories as f64) as usize,
        }
    }
}

/// Masks a complete annotation down to `round(p * C)` known labels per image.
///
/// Kept entries are one joint uniform draw without replacement over all `C`
/// labels of the row, so positives and negatives are dropped alike.
pub fn drop_labels(full: &LabelMatrix, spec: &ProportionSpec) -> Result<LabelMatrix> {
    if !(spec.proportion > 0.0 && spec.proportion <= 1.0) {
        return Err(Error::InvalidProportion(spec.proportion));
    }
    if let Some(i) = full.values.iter().position(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::IncompleteLabels {
            row: i / full.cols,
            col: i % full.cols,
        });
    }
    let keep = spec.kept_per_image(full.cols).min(full.cols);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = alloc::vec![0.0; full.values.len()];
    for r in 0..full.rows {
        let base = r * full.cols;
        for c in rand::seq::index::sample(&mut rng, full.cols, keep).iter() {
            values[base + c] = full.values[base + c];
        }
    }
    Ok(LabelMatrix {
        rows: full.rows,
        cols: full.cols,
        values,
    })
}

/// Per-category label counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CategoryStats {
    pub positive: usize,
    pub negative: usize,
    pub unknown: usize,
    /// Blended entries in `(0, 1)`.
    pub soft: usize,
}

impl CategoryStats {
    pub fn total(&self) -> usize {
        self.positive + self.negative + self.unknown + self.soft
    }
}

pub fn known_stats(m: &LabelMatrix) -> Vec<CategoryStats> {
    let mut stats = alloc::vec![CategoryStats::default(); m.cols];
    for r in 0..m.rows {
        for (c, &v) in m.row(r).iter().enumerate() {
            let s = &mut stats[c];
            if v == 1.0 {
                s.positive += 1;
            } else if v == -1.0 {
                s.negative += 1;
            } else if v == 0.0 {
                s.unknown += 1;
            } else {
                s.soft += 1;
            }
        }
    }
    stats
}
