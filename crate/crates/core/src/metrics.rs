//! mAP, OF1 and CF1 on complete held-out labels.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::labelspace::LabelMatrix;

/// Default decision threshold for the F1 measures.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Non-interpolated average precision.
///
/// Images are ranked by descending score, ties by ascending index. Returns
/// `None` when there is no positive.
pub fn average_precision(scores: &[f64], gt: &[bool]) -> Option<f64> {
    debug_assert_eq!(scores.len(), gt.len());
    let positives = gt.iter().filter(|&&g| g).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if gt[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Measures {
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    /// Categories with no predicted or no ground-truth positive.
    pub degenerate_categories: usize,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Overall and per-class precision, recall and F1 at `scores >= threshold`.
///
/// `scores` and `gt` are row-major `N x C`.
pub fn f1_measures(scores: &[f64], gt: &[bool], categories: usize, threshold: f64) -> Result<F1Measures> {
    check_len("f1 ground truth", scores.len(), gt.len())?;
    if categories == 0 || !scores.len().is_multiple_of(categories) {
        return Err(Error::ShapeMismatch {
            what: "f1 scores",
            expected: categories,
            actual: scores.len(),
        });
    }
    let mut correct = alloc::vec![0usize; categories];
    let mut predicted = alloc::vec![0usize; categories];
    let mut truth = alloc::vec![0usize; categories];
    for (i, (&s, &g)) in scores.iter().zip(gt).enumerate() {
        let c = i % categories;
        let p = s >= threshold;
        predicted[c] += p as usize;
        truth[c] += g as usize;
        correct[c] += (p && g) as usize;
    }
    let (nc, np, ng): (usize, usize, usize) = (correct.iter().sum(), predicted.iter().sum(), truth.iter().sum());
    let op = ratio(nc, np);
    let or = ratio(nc, ng);
    let mut cp = 0.0;
    let mut cr = 0.0;
    let mut degenerate = 0;
    for c in 0..categories {
        if predicted[c] == 0 || truth[c] == 0 {
            degenerate += 1;
        }
        cp += ratio(correct[c], predicted[c]);
        cr += ratio(correct[c], truth[c]);
    }
    cp /= categories as f64;
    cr /= categories as f64;
    Ok(F1Measures {
        op,
        or,
        of1: f1(op, or),
        cp,
        cr,
        cf1: f1(cp, cr),
        degenerate_categories: degenerate,
    })
}

/// Metrics of one trained model on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Known-label proportion the model was trained at.
    pub proportion: Option<f64>,
    /// `None` for categories without a test positive.
    pub per_category_ap: Vec<Option<f64>>,
    pub map: f64,
    pub f1: F1Measures,
}

impl EvalReport {
    pub fn of1(&self) -> f64 {
        self.f1.of1
    }

    pub fn cf1(&self) -> f64 {
        self.f1.cf1
    }
}

/// Scores `N x C` against complete labels.
pub fn evaluate_scores(scores: &[f64], labels: &LabelMatrix, threshold: f64) -> Result<EvalReport> {
    let c_n = labels.categories();
    check_len("score matrix", labels.rows() * c_n, scores.len())?;
    if let Some(i) = labels.values().iter().position(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::IncompleteLabels {
            row: i / c_n,
            col: i % c_n,
        });
    }
    let gt: Vec<bool> = labels.values().iter().map(|&v| v == 1.0).collect();
    let mut per_category_ap = Vec::with_capacity(c_n);
    for c in 0..c_n {
        let col_s: Vec<f64> = (0..labels.rows()).map(|n| scores[n * c_n + c]).collect();
        let col_g: Vec<bool> = (0..labels.rows()).map(|n| gt[n * c_n + c]).collect();
        per_category_ap.push(average_precision(&col_s, &col_g));
    }
    let valid: Vec<f64> = per_category_ap.iter().flatten().copied().collect();
    let map = if valid.is_empty() {
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    Ok(EvalReport {
        proportion: None,
        per_category_ap,
        map,
        f1: f1_measures(scores, &gt, c_n, threshold)?,
    })
}

/// Averages over a set of proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub map: f64,
    pub of1: f64,
    pub cf1: f64,
    pub count: usize,
}

pub fn aggregate_proportions(reports: &[EvalReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::Empty("no reports to aggregate"));
    }
    let c_n = reports[0].per_category_ap.len();
    for r in reports {
        check_len("report categories", c_n, r.per_category_ap.len())?;
    }
    let n = reports.len() as f64;
    Ok(Aggregate {
        map: reports.iter().map(|r| r.map).sum::<f64>() / n,
        of1: reports.iter().map(|r| r.of1()).sum::<f64>() / n,
        cf1: reports.iter().map(|r| r.cf1()).sum::<f64>() / n,
        count: reports.len(),
    })
}
