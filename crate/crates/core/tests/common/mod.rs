//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use attrition_core::calendar::YearMonth;
use attrition_core::features::WeightScheme;
use attrition_core::gbdt::{train_gbdt, GbdtModel, GbdtParams, TrainData};
use attrition_core::matrix::Matrix;
use attrition_core::panel::{OutcomeType, PanelDataset, PanelRow, PanelSpec};
use attrition_core::pipeline::{synthetic_pipeline_config, write_synthetic_org, PipelineConfig, SynthConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Average precision from an explicit threshold sweep: for every distinct
/// score t (descending), precision and recall of `score >= t`, summed as
/// recall increments times precision.
pub fn ap_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let total_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let (mut tp, mut fp) = (0.0, 0.0);
        for (s, y) in scores.iter().zip(labels) {
            if *s >= t {
                if *y == 1 {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let recall = tp / total_pos;
        if tp > 0.0 {
            ap += (recall - prev_recall) * tp / (tp + fp);
        }
        prev_recall = recall;
    }
    ap
}

/// ROC AUC by counting every (positive, negative) pair.
pub fn roc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &yi) in labels.iter().enumerate() {
        if yi != 1 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj != 0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Weighted least-squares nondecreasing fit by enumerating every partition of
/// the sequence into contiguous blocks, each set to its weighted mean.
pub fn isotonic_oracle(values: &[f64], weights: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for cuts in 0u32..(1 << (n - 1)) {
        let mut fit = Vec::with_capacity(n);
        let mut start = 0;
        for end in 1..=n {
            if end == n || cuts & (1 << (end - 1)) != 0 {
                let w: f64 = weights[start..end].iter().sum();
                let m = values[start..end].iter().zip(&weights[start..end]).map(|(v, w)| v * w).sum::<f64>() / w;
                fit.extend(std::iter::repeat_n(m, end - start));
                start = end;
            }
        }
        if fit.windows(2).any(|p| p[0] > p[1] + 1e-15) {
            continue;
        }
        let sse: f64 = fit.iter().zip(values).zip(weights).map(|((f, v), w)| w * (f - v).powi(2)).sum();
        if best.as_ref().is_none_or(|(b, _)| sse < *b - 1e-15) {
            best = Some((sse, fit));
        }
    }
    best.expect("the single-block partition is always monotone").1
}

pub fn panel_spec() -> PanelSpec {
    PanelSpec {
        prediction_month: "2024-03".parse().unwrap(),
        horizon_months: 3,
        lookback_months: 12,
        outcome_type: OutcomeType::TotalAttrition,
    }
}

/// A panel with random employees, row counts, labels and two strata keys.
pub fn random_panel(rng: &mut ChaCha8Rng, max_employees: usize) -> PanelDataset {
    let spec = panel_spec();
    let (first, _) = spec.window();
    let n = rng.random_range(1..=max_employees);
    let families = ["Sales", "Engineering", "Support"];
    let sites = ["North", "South"];
    let mut rows = Vec::new();
    for e in 0..n {
        let id = format!("E{:05}", rng.random_range(0..100_000));
        if rows.iter().any(|r: &PanelRow| r.employee_id == id) {
            continue;
        }
        let n_rows = rng.random_range(1..=4);
        let start = rng.random_range(0..6);
        let positive_rate = if e % 5 == 0 { 0.5 } else { 0.05 };
        for k in 0..n_rows {
            rows.push(PanelRow {
                employee_id: id.clone(),
                snapshot_date: first.add_months(start + k).last_day(),
                label: rng.random_bool(positive_rate) as u8,
                strata: [
                    ("job_family".to_string(), families[rng.random_range(0..families.len())].to_string()),
                    ("site".to_string(), sites[rng.random_range(0..sites.len())].to_string()),
                ]
                .into(),
                values: vec![],
            });
        }
    }
    PanelDataset {
        spec,
        columns: vec![],
        strata_keys: vec!["job_family".into(), "site".into()],
        rows,
        terminations: BTreeMap::new(),
    }
}

pub fn small_params() -> GbdtParams {
    GbdtParams {
        num_leaves: 8,
        learning_rate: 0.3,
        n_estimators: 10,
        min_data_in_leaf: 2,
        early_stopping_rounds: 0,
        class_weight: WeightScheme::None,
        ..Default::default()
    }
}

/// Random features in `[0, 1)` with a share of missing cells.
pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, missing_rate: f64) -> Matrix {
    let data = (0..n * d)
        .map(|_| if rng.random_bool(missing_rate) { f64::NAN } else { rng.random::<f64>() })
        .collect();
    Matrix::new(n, d, data).unwrap()
}

/// A model trained on random data: up to 5 features, 10 trees, depth 4.
pub fn random_model(rng: &mut ChaCha8Rng) -> (GbdtModel, Matrix) {
    let d = rng.random_range(1..=5);
    let n = rng.random_range(40..=160);
    let x = random_matrix(rng, n, d, 0.1);
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
    let labels: Vec<u8> = (0..n)
        .map(|i| {
            let z: f64 = x.row(i).iter().zip(&w).map(|(v, w)| if v.is_nan() { 0.5 * w } else { v * w }).sum();
            (z + rng.random_range(-0.5..0.5) > 0.5 * w.iter().sum::<f64>()) as u8
        })
        .collect();
    let mut labels = labels;
    labels[0] = 0;
    labels[1] = 1;
    let params = GbdtParams {
        num_leaves: rng.random_range(2..=16),
        max_depth: Some(rng.random_range(1..=4)),
        n_estimators: rng.random_range(1..=10),
        learning_rate: rng.random_range(0.05..1.0),
        min_data_in_leaf: rng.random_range(1..=5),
        max_bins: rng.random_range(2..=32),
        ..small_params()
    };
    let names = (0..d).map(|j| format!("x{j}")).collect();
    let (model, _) = train_gbdt(
        TrainData {
            features: &x,
            labels: &labels,
            weights: None,
        },
        None,
        &params,
        names,
    )
    .unwrap();
    (model, x)
}

pub fn month(s: &str) -> YearMonth {
    s.parse().unwrap()
}

/// Writes a synthetic organization into `dir` and returns the matching
/// pipeline config with outputs under `dir/run`.
pub fn synthetic_setup(dir: &Path, synth: &SynthConfig) -> PipelineConfig {
    let (paths, _) = write_synthetic_org(synth, dir).unwrap();
    synthetic_pipeline_config(synth, &paths, dir.join("run"))
}
