//! Score-to-probability calibration fitted on the validation fold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gbdt::sigmoid;
use crate::split::Fold;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationKind {
    Isotonic,
    Sigmoid,
    SegmentMean,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub score: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub n: usize,
    pub label_mean: f64,
    /// Population standard deviation of the labels; diagnostic only.
    pub label_std: f64,
    pub score_mean: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibrationMap {
    Isotonic {
        knots: Vec<Knot>,
    },
    /// `p(s) = 1 / (1 + exp(a * s + b))`
    Sigmoid {
        a: f64,
        b: f64,
    },
    SegmentMean {
        segments: BTreeMap<String, SegmentStats>,
        /// Applied to segments not seen during fitting.
        global_scale: f64,
    },
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibrator {
    #[serde(flatten)]
    pub map: CalibrationMap,
    /// Fold the calibrator was fitted on, when fitted through [`fit_calibrator`].
    pub fit_fold: Option<Fold>,
}

impl Calibrator {
    pub fn identity() -> Self {
        Calibrator {
            map: CalibrationMap::Identity,
            fit_fold: None,
        }
    }

    pub fn kind(&self) -> CalibrationKind {
        match self.map {
            CalibrationMap::Isotonic { .. } => CalibrationKind::Isotonic,
            CalibrationMap::Sigmoid { .. } => CalibrationKind::Sigmoid,
            CalibrationMap::SegmentMean { .. } => CalibrationKind::SegmentMean,
            CalibrationMap::Identity => CalibrationKind::Identity,
        }
    }

    /// Calibrated probability of one score; `segment` is only read by segment-mean maps.
    pub fn apply(&self, score: f64, segment: Option<&str>) -> f64 {
        let p = match &self.map {
            CalibrationMap::Identity => score,
            CalibrationMap::Sigmoid { a, b } => sigmoid(-(a * score + b)),
            CalibrationMap::Isotonic { knots } => interpolate(knots, score),
            CalibrationMap::SegmentMean { segments, global_scale } => {
                let scale = segment
                    .and_then(|s| segments.get(s))
                    .map_or(*global_scale, |st| st.scale);
                score * scale
            }
        };
        p.clamp(0.0, 1.0)
    }

    pub fn apply_all(&self, scores: &[f64], segments: Option<&[String]>) -> Vec<f64> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| self.apply(s, segments.map(|seg| seg[i].as_str())))
            .collect()
    }

    /// Applies the calibrator to rows of `fold` for evaluation, refusing any
    /// combination other than a validation-fitted calibrator on test rows.
    pub fn apply_for_evaluation(&self, scores: &[f64], segments: Option<&[String]>, fold: Fold) -> Result<Vec<f64>> {
        if self.fit_fold != Some(Fold::Valid) {
            return Err(Error::Validation(format!(
                "calibrator fitted on {:?}; evaluation needs one fitted on the valid fold",
                self.fit_fold
            )));
        }
        if fold != Fold::Test {
            return Err(Error::Validation(format!("calibrated evaluation runs on the test fold, not {fold}")));
        }
        if segments.is_some_and(|s| s.len() != scores.len()) {
            return Err(invalid!("segment count does not match score count"));
        }
        Ok(self.apply_all(scores, segments))
    }
}

fn interpolate(knots: &[Knot], s: f64) -> f64 {
    let (first, last) = (knots[0], knots[knots.len() - 1]);
    if s <= first.score {
        return first.value;
    }
    if s >= last.score {
        return last.value;
    }
    let j = knots.partition_point(|k| k.score <= s);
    let (lo, hi) = (knots[j - 1], knots[j]);
    lo.value + (hi.value - lo.value) * (s - lo.score) / (hi.score - lo.score)
}

fn check_fit_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(invalid!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.len() < 2 {
        return Err(invalid!("calibration needs at least 2 rows"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid!("calibration scores must be finite"));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(invalid!("labels must be 0 or 1"));
    }
    Ok(())
}

/// Weighted pool-adjacent-violators fit of a non-decreasing sequence.
///
/// Adjacent blocks with equal means are pooled too, so distinct output
/// levels strictly increase.
pub fn pava(values: &[f64], weights: &[f64]) -> Vec<f64> {
    // (weighted sum, weight, number of points)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v * w, w, 1));
        while blocks.len() >= 2 {
            let (s2, w2, n2) = blocks[blocks.len() - 1];
            let (s1, w1, n1) = blocks[blocks.len() - 2];
            if s1 / w1 < s2 / w2 {
                break;
            }
            blocks.pop();
            *blocks.last_mut().unwrap() = (s1 + s2, w1 + w2, n1 + n2);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(s, w, n)| std::iter::repeat_n(s / w, n))
        .collect()
}

struct TieGroup {
    score: f64,
    sum: f64,
    count: f64,
}

fn tie_groups(scores: &[f64], labels: &[u8]) -> Vec<TieGroup> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<TieGroup> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if g.score == scores[i] => {
                g.sum += labels[i] as f64;
                g.count += 1.0;
            }
            _ => groups.push(TieGroup {
                score: scores[i],
                sum: labels[i] as f64,
                count: 1.0,
            }),
        }
    }
    groups
}

/// Isotonic fitted value of every input row, in input order.
pub fn isotonic_fitted_values(scores: &[f64], labels: &[u8]) -> Result<Vec<f64>> {
    check_fit_inputs(scores, labels)?;
    let groups = tie_groups(scores, labels);
    let means: Vec<f64> = groups.iter().map(|g| g.sum / g.count).collect();
    let weights: Vec<f64> = groups.iter().map(|g| g.count).collect();
    let fitted = pava(&means, &weights);
    Ok(scores
        .iter()
        .map(|s| {
            let g = groups.partition_point(|g| g.score < *s);
            fitted[g]
        })
        .collect())
}

/// Isotonic calibrator with one knot per pooled block.
///
/// The lowest block's knot sits at its smallest score, the highest block's at
/// its largest score, and every other block's at the midpoint of its score
/// range; applying interpolates linearly between knots.
pub fn fit_isotonic(scores: &[f64], labels: &[u8]) -> Result<Calibrator> {
    check_fit_inputs(scores, labels)?;
    let groups = tie_groups(scores, labels);
    let means: Vec<f64> = groups.iter().map(|g| g.sum / g.count).collect();
    let weights: Vec<f64> = groups.iter().map(|g| g.count).collect();
    let fitted = pava(&means, &weights);

    let mut ranges: Vec<(f64, f64, f64)> = Vec::new();
    for (g, &v) in groups.iter().zip(&fitted) {
        match ranges.last_mut() {
            Some(r) if r.2 == v => r.1 = g.score,
            _ => ranges.push((g.score, g.score, v)),
        }
    }
    let last = ranges.len() - 1;
    let knots = ranges
        .iter()
        .enumerate()
        .map(|(i, &(lo, hi, value))| {
            let score = if i == 0 {
                lo
            } else if i == last {
                hi
            } else {
                lo + 0.5 * (hi - lo)
            };
            Knot { score, value }
        })
        .collect();
    Ok(Calibrator {
        map: CalibrationMap::Isotonic { knots },
        fit_fold: None,
    })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid_nll(scores: &[f64], labels: &[u8], a: f64, b: f64) -> f64 {
    let n = scores.len() as f64;
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let z = a * s + b;
            if y == 1 {
                softplus(z)
            } else {
                softplus(-z)
            }
        })
        .sum::<f64>()
        / n
}

/// Maximum-likelihood `(a, b)` for `1 / (1 + exp(a * s + b))` without sign constraints.
pub fn fit_sigmoid_unconstrained(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    check_fit_inputs(scores, labels)?;
    let n = scores.len() as f64;
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    if n_pos == 0.0 || n_pos == n {
        return Err(invalid!("sigmoid calibration needs both classes present"));
    }
    const RIDGE: f64 = 1e-12;
    let (mut a, mut b) = (0.0, ((n - n_pos) / n_pos).ln());
    let mut f = sigmoid_nll(scores, labels, a, b);
    for _ in 0..100 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&s, &y) in scores.iter().zip(labels) {
            let p = sigmoid(-(a * s + b));
            let r = y as f64 - p;
            let w = p * (1.0 - p);
            ga += r * s;
            gb += r;
            haa += w * s * s;
            hab += w * s;
            hbb += w;
        }
        let (ga, gb) = (ga / n, gb / n);
        if ga.abs().max(gb.abs()) < 1e-10 {
            break;
        }
        let (haa, hab, hbb) = (haa / n + RIDGE, hab / n, hbb / n + RIDGE);
        let det = haa * hbb - hab * hab;
        if !(det > 0.0) {
            break;
        }
        let da = -(hbb * ga - hab * gb) / det;
        let db = -(haa * gb - hab * ga) / det;
        let slope = ga * da + gb * db;
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let f_new = sigmoid_nll(scores, labels, a + t * da, b + t * db);
            if f_new <= f + 1e-4 * t * slope {
                a += t * da;
                b += t * db;
                f = f_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok((a, b))
}

/// Sigmoid calibrator constrained to be non-decreasing in the score.
///
/// When the unconstrained optimum has `a > 0` the slope is fixed at zero and
/// the intercept refitted, which yields the constant base-rate predictor.
pub fn fit_sigmoid(scores: &[f64], labels: &[u8]) -> Result<Calibrator> {
    let (mut a, mut b) = fit_sigmoid_unconstrained(scores, labels)?;
    if a > 0.0 {
        let n = labels.len() as f64;
        let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
        a = 0.0;
        b = ((n - n_pos) / n_pos).ln();
    }
    Ok(Calibrator {
        map: CalibrationMap::Sigmoid { a, b },
        fit_fold: None,
    })
}

fn stats(scores: &[f64], labels: &[u8]) -> Result<SegmentStats> {
    let n = scores.len() as f64;
    let label_mean = labels.iter().map(|&y| y as f64).sum::<f64>() / n;
    let score_mean = scores.iter().sum::<f64>() / n;
    if !(score_mean > 0.0) {
        return Err(invalid!("segment raw-score mean is {score_mean}; cannot scale"));
    }
    let var = labels.iter().map(|&y| (y as f64 - label_mean).powi(2)).sum::<f64>() / n;
    Ok(SegmentStats {
        n: scores.len(),
        label_mean,
        label_std: var.sqrt(),
        score_mean,
        scale: label_mean / score_mean,
    })
}

/// Per-segment ratio of label mean to raw-score mean.
pub fn fit_segment_mean(scores: &[f64], labels: &[u8], segments: &[String]) -> Result<Calibrator> {
    check_fit_inputs(scores, labels)?;
    if segments.len() != scores.len() {
        return Err(invalid!("{} segment values for {} scores", segments.len(), scores.len()));
    }
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((&s, &y), seg) in scores.iter().zip(labels).zip(segments) {
        let g = groups.entry(seg.as_str()).or_default();
        g.0.push(s);
        g.1.push(y);
    }
    let mut out = BTreeMap::new();
    for (seg, (s, y)) in groups {
        let st = stats(&s, &y).map_err(|e| invalid!("segment {seg:?}: {e}"))?;
        out.insert(seg.to_string(), st);
    }
    let global_scale = stats(scores, labels)?.scale;
    Ok(Calibrator {
        map: CalibrationMap::SegmentMean {
            segments: out,
            global_scale,
        },
        fit_fold: None,
    })
}

/// Fits a calibrator of `kind`, recording `fold` as its provenance.
///
/// Only the valid fold is accepted.
pub fn fit_calibrator(
    kind: CalibrationKind,
    scores: &[f64],
    labels: &[u8],
    segments: Option<&[String]>,
    fold: Fold,
) -> Result<Calibrator> {
    if fold != Fold::Valid {
        return Err(Error::Validation(format!("calibrators are fitted on the valid fold, not {fold}")));
    }
    let mut cal = match kind {
        CalibrationKind::Isotonic => fit_isotonic(scores, labels)?,
        CalibrationKind::Sigmoid => fit_sigmoid(scores, labels)?,
        CalibrationKind::Identity => Calibrator::identity(),
        CalibrationKind::SegmentMean => {
            let segments = segments.ok_or_else(|| Error::Config("segment_mean calibration needs a segment key".into()))?;
            fit_segment_mean(scores, labels, segments)?
        }
    };
    cal.fit_fold = Some(fold);
    Ok(cal)
}
