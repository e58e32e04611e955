//! Ranking, thresholded and probability-quality metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(invalid!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid!("scores contain NaN"));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(invalid!("labels must be 0 or 1"));
    }
    Ok(())
}

/// Average precision with tied scores processed as a single block.
pub fn auc_pr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let total_pos = labels.iter().filter(|&&y| y == 1).count();
    if total_pos == 0 {
        return Err(invalid!("average precision needs at least one positive label"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut block_pos = 0;
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                block_pos += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        tp += block_pos;
        if block_pos > 0 {
            ap += (block_pos as f64 / total_pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties counting one half.
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(invalid!("ROC AUC needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j share their average.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_block = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        pos_rank_sum += avg_rank * pos_in_block as f64;
        i = j;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtThreshold {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio_or_zero(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion counts and derived rates when predicting positive iff `score >= threshold`.
pub fn classification_report(scores: &[f64], labels: &[u8], threshold: f64) -> Result<AtThreshold> {
    check_inputs(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = ratio_or_zero(tp, tp + fp);
    let recall = ratio_or_zero(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(AtThreshold {
        threshold,
        tp,
        fp,
        tn,
        fn_,
        precision,
        recall,
        f1,
    })
}

/// Brier score and expected calibration error over `n_bins` equal-width bins.
pub fn probability_diagnostics(probs: &[f64], labels: &[u8], n_bins: usize) -> Result<(f64, f64)> {
    check_inputs(probs, labels)?;
    if probs.is_empty() {
        return Err(invalid!("probability diagnostics need at least one row"));
    }
    if n_bins == 0 {
        return Err(invalid!("ECE needs at least one bin"));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(invalid!("probabilities must lie in [0, 1]"));
    }
    let n = probs.len() as f64;
    let brier = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| (p - y as f64).powi(2))
        .sum::<f64>()
        / n;
    let mut sum_p = vec![0.0; n_bins];
    let mut sum_y = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let b = ((p * n_bins as f64).floor() as usize).min(n_bins - 1);
        sum_p[b] += p;
        sum_y[b] += y as f64;
        count[b] += 1;
    }
    let ece = (0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (sum_p[b] - sum_y[b]).abs() / n)
        .sum();
    Ok((brier, ece))
}

/// Mean absolute percentage error between predicted and realized group rates.
pub fn rate_mape(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(invalid!("{} predicted rates for {} actual rates", predicted.len(), actual.len()));
    }
    if actual.is_empty() {
        return Err(invalid!("rate MAPE needs at least one group"));
    }
    if let Some(a) = actual.iter().find(|a| !(**a > 0.0)) {
        return Err(invalid!("actual group rates must be positive, found {a}"));
    }
    let total: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a).abs() / a).sum();
    Ok(total / actual.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub n_pos: usize,
    /// `None` when the segment has no positives.
    pub auc_pr: Option<f64>,
    /// `None` when the segment is single-class.
    pub auc_roc: Option<f64>,
    pub at_threshold: AtThreshold,
    pub brier: f64,
    pub ece: f64,
    pub ece_bins: usize,
}

pub fn metrics_report(scores: &[f64], labels: &[u8], threshold: f64, ece_bins: usize) -> Result<MetricsReport> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let (brier, ece) = probability_diagnostics(scores, labels, ece_bins)?;
    Ok(MetricsReport {
        n: labels.len(),
        n_pos,
        auc_pr: auc_pr(scores, labels).ok(),
        auc_roc: auc_roc(scores, labels).ok(),
        at_threshold: classification_report(scores, labels, threshold)?,
        brier,
        ece,
        ece_bins,
    })
}

/// One report per distinct segment value.
pub fn segment_metrics(
    scores: &[f64],
    labels: &[u8],
    segments: &[String],
    threshold: f64,
    ece_bins: usize,
) -> Result<BTreeMap<String, MetricsReport>> {
    check_inputs(scores, labels)?;
    if segments.len() != scores.len() {
        return Err(invalid!("{} segment values for {} scores", segments.len(), scores.len()));
    }
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((&s, &y), seg) in scores.iter().zip(labels).zip(segments) {
        let g = groups.entry(seg.as_str()).or_default();
        g.0.push(s);
        g.1.push(y);
    }
    groups
        .into_iter()
        .map(|(k, (s, y))| Ok((k.to_string(), metrics_report(&s, &y, threshold, ece_bins)?)))
        .collect()
}
