//! Threshold-free ranking metrics for image scores and pixel maps.
//!
//! All curves are swept at the unique observed scores, predicting positive
//! when `score >= threshold`. Ties contribute one half to AUROC.

pub mod aupro;
pub mod report;

pub use aupro::{aupro, label_regions, DEFAULT_AUPRO_FPR_LIMIT};
pub use report::{
    evaluate_images, mean_and_std, ClassReport, EvalItem, MetricValues, MetricsReport, ReportConfig,
    METRIC_COLUMNS,
};

use crate::error::{Error, Result};

/// Scores paired with binary labels (`true` = anomaly).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        let set = Self { scores, labels };
        set.validate()?;
        Ok(set)
    }

    pub fn push(&mut self, score: f64, label: bool) {
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    fn validate(&self) -> Result<()> {
        if self.scores.len() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} scores vs {} labels",
                self.scores.len(),
                self.labels.len()
            )));
        }
        if let Some(i) = self.scores.iter().position(|s| s.is_nan()) {
            return Err(Error::Validation(format!("NaN score at index {i}")));
        }
        Ok(())
    }

    /// Confusion counts `(tp, fp)` after each group of tied scores, walking
    /// thresholds from the highest score down.
    fn descending_sweep(&self) -> Vec<(usize, usize)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut points = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        let mut i = 0;
        while i < order.len() {
            let s = self.scores[order[i]];
            while i < order.len() && self.scores[order[i]] == s {
                if self.labels[order[i]] {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            points.push((tp, fp));
        }
        points
    }
}

fn require_positives(set: &ScoredSet, metric: &str) -> Result<usize> {
    set.validate()?;
    let p = set.positives();
    if p == 0 {
        return Err(Error::UndefinedMetric(format!(
            "{metric} needs at least one positive"
        )));
    }
    Ok(p)
}

/// Mann–Whitney AUROC with average ranks for ties.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    set.validate()?;
    let p = set.positives();
    let n = set.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both normal and anomalous samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && set.scores[order[j]] == set.scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        let pos = order[i..j].iter().filter(|&&k| set.labels[k]).count();
        rank_sum_pos += mean_rank * pos as f64;
        i = j;
    }
    let u = rank_sum_pos - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

/// Step-wise average precision: `sum_k (R_k - R_{k-1}) * P_k`.
pub fn aupr(set: &ScoredSet) -> Result<f64> {
    let p = require_positives(set, "AUPR")? as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in set.descending_sweep() {
        let recall = tp as f64 / p;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Best F1 over all thresholds.
pub fn f1_max(set: &ScoredSet) -> Result<f64> {
    let p = require_positives(set, "F1max")?;
    Ok(set
        .descending_sweep()
        .into_iter()
        .map(|(tp, fp)| 2.0 * tp as f64 / (2 * tp + fp + (p - tp)) as f64)
        .fold(0.0, f64::max))
}

/// Per-bin positive/negative counts over `bins` equal-width bins spanning
/// the observed score range.
fn histogram(set: &ScoredSet, bins: usize) -> Result<(Vec<u64>, Vec<u64>)> {
    set.validate()?;
    if bins == 0 {
        return Err(Error::Usage("bin count must be positive".into()));
    }
    let lo = set.scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = set.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = hi - lo;
    let mut pos = vec![0u64; bins];
    let mut neg = vec![0u64; bins];
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        let b = if width > 0.0 {
            (((s - lo) / width * bins as f64) as usize).min(bins - 1)
        } else {
            0
        };
        if l {
            pos[b] += 1;
        } else {
            neg[b] += 1;
        }
    }
    Ok((pos, neg))
}

/// Histogram approximation of [`auroc`] for very large pixel sets.
pub fn auroc_binned(set: &ScoredSet, bins: usize) -> Result<f64> {
    let (pos, neg) = histogram(set, bins)?;
    let p: u64 = pos.iter().sum();
    let n: u64 = neg.iter().sum();
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both normal and anomalous samples".into(),
        ));
    }
    let mut neg_below = 0u64;
    let mut acc = 0.0;
    for (&bp, &bn) in pos.iter().zip(&neg) {
        acc += bp as f64 * (neg_below as f64 + 0.5 * bn as f64);
        neg_below += bn;
    }
    Ok(acc / (p as f64 * n as f64))
}

/// Histogram approximation of [`aupr`].
pub fn aupr_binned(set: &ScoredSet, bins: usize) -> Result<f64> {
    let (pos, neg) = histogram(set, bins)?;
    let p: u64 = pos.iter().sum();
    if p == 0 {
        return Err(Error::UndefinedMetric("AUPR needs at least one positive".into()));
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    for (&bp, &bn) in pos.iter().zip(&neg).rev() {
        if bp + bn == 0 {
            continue;
        }
        tp += bp;
        fp += bn;
        ap += (bp as f64 / p as f64) * (tp as f64 / (tp + fp) as f64);
    }
    Ok(ap)
}
