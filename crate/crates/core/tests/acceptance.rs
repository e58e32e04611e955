//! Acceptance suite: one pass/fail line per criterion, non-zero exit on any failure.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use attrition_core::calibrate::{isotonic_fitted_values, pava};
use attrition_core::evaluate::{auc_pr, auc_roc};
use attrition_core::explain::{shapley_oracle, tree_shap};
use attrition_core::features::WeightScheme;
use attrition_core::gbdt::{train_gbdt, weighted_log_loss, GbdtModel, GbdtParams, TrainData};
use attrition_core::ingest::{Column, ColumnKind, Event, EventTable, EventType, SnapshotRow, SnapshotTable, Value};
use attrition_core::matrix::Matrix;
use attrition_core::panel::{build_panel, leakage_audit, OutcomeType, PanelRow, PanelSpec, ViolationKind};
use attrition_core::pipeline::{planted_coefficients, run_pipeline, MetricsFile, RunManifest, Stage, SynthConfig};
use attrition_core::split::{group_stratified_split, largest_remainder, Fold, Fractions};
use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn random_scores(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=200);
    // Few distinct levels force ties.
    let levels = rng.random_range(1..=n.min(20)) as f64;
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.3) as u8).collect();
    labels[0] = 1;
    labels[1] = 0;
    let scores = (0..n).map(|_| (rng.random_range(0.0..levels)).floor() / levels).collect();
    (scores, labels)
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let instances = 600;
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (s, y) = random_scores(&mut rng);
        let dp = (auc_pr(&s, &y).map_err(|e| e.to_string())? - common::ap_oracle(&s, &y)).abs();
        let dr = (auc_roc(&s, &y).map_err(|e| e.to_string())? - common::roc_oracle(&s, &y)).abs();
        worst = worst.max(dp).max(dr);
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("{instances} instances, max deviation {worst:e}, {:.2?}", start.elapsed()))
}

fn pava_correctness() -> Outcome {
    // Every sequence over a 3-level grid with unit or doubled weights, n <= 6.
    let mut grid_instances = 0;
    for n in 1..=6u32 {
        for code in 0..3u32.pow(n) {
            for wcode in [0u32, code % (1 << n)] {
                let values: Vec<f64> = (0..n).map(|i| ((code / 3u32.pow(i)) % 3) as f64 / 2.0).collect();
                let weights: Vec<f64> = (0..n).map(|i| 1.0 + ((wcode >> i) & 1) as f64).collect();
                let fit = pava(&values, &weights);
                let oracle = common::isotonic_oracle(&values, &weights);
                let dev = fit.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                ensure(dev <= 1e-12, || format!("{values:?} w={weights:?}: {fit:?} vs {oracle:?}"))?;
                grid_instances += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let random_instances = 600;
    for _ in 0..random_instances {
        let n = rng.random_range(2..=300);
        let levels = rng.random_range(1..=50) as f64;
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..levels)).floor() / levels).collect();
        let labels: Vec<u8> = scores.iter().map(|s| rng.random_bool(s * 0.8 + 0.1) as u8).collect();
        let fitted = isotonic_fitted_values(&scores, &labels).map_err(|e| e.to_string())?;
        let mass: f64 = labels.iter().map(|&y| y as f64).sum::<f64>() - fitted.iter().sum::<f64>();
        ensure(mass.abs() <= 1e-12, || format!("mean not preserved: {mass:e}"))?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        ensure(order.windows(2).all(|p| fitted[p[0]] <= fitted[p[1]]), || "fit not monotone".into())?;
    }
    Ok(format!("{grid_instances} grid instances exact, {random_instances} random instances"))
}

fn shap_oracle(e2e: &RunManifest) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let models = 120;
    let mut worst: f64 = 0.0;
    for _ in 0..models {
        let (model, x) = common::random_model(&mut rng);
        for i in 0..x.n_rows().min(8) {
            let fast = tree_shap(&model, x.row(i)).map_err(|e| e.to_string())?;
            let slow = shapley_oracle(&model, x.row(i)).map_err(|e| e.to_string())?;
            for (a, b) in fast.phi.iter().zip(&slow.phi) {
                worst = worst.max((a - b).abs());
            }
            worst = worst.max((fast.base_value - slow.base_value).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("tree SHAP deviates from oracle by {worst:e}"))?;
    let shap = e2e.summary.shap.as_ref().ok_or("end-to-end run has no SHAP summary")?;
    ensure(shap.rows_explained > 0, || "no rows explained".into())?;
    ensure(shap.max_local_accuracy_error <= 1e-9, || {
        format!("local accuracy error {:e}", shap.max_local_accuracy_error)
    })?;
    Ok(format!(
        "{models} models, max deviation {worst:e}; {} rows explained end to end, local accuracy error {:e}",
        shap.rows_explained, shap.max_local_accuracy_error
    ))
}

fn split_guarantees() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fractions = Fractions::default();
    let keys = vec!["job_family".to_string(), "site".to_string()];
    let panels = 1000;
    for p in 0..panels {
        let panel = common::random_panel(&mut rng, 120);
        let seed = rng.random::<u64>();
        let s = group_stratified_split(&panel, fractions, &keys, seed).map_err(|e| e.to_string())?;

        let mut seen: BTreeMap<&str, Fold> = BTreeMap::new();
        for f in Fold::ALL {
            for i in s.rows_in(&panel, f) {
                let id = panel.rows[i].employee_id.as_str();
                if let Some(prev) = seen.insert(id, f) {
                    ensure(prev == f, || format!("panel {p}: {id} in {prev:?} and {f:?}"))?;
                }
            }
        }
        ensure(seen.len() == s.fold_of_employee.len(), || format!("panel {p}: employee count mismatch"))?;

        let mut strata: BTreeMap<(String, String, bool), Vec<&str>> = BTreeMap::new();
        let mut latest: BTreeMap<&str, &PanelRow> = BTreeMap::new();
        let mut positive: BTreeSet<&str> = BTreeSet::new();
        for r in &panel.rows {
            let slot = latest.entry(&r.employee_id).or_insert(r);
            if r.snapshot_date > slot.snapshot_date {
                *slot = r;
            }
            if r.label == 1 {
                positive.insert(&r.employee_id);
            }
        }
        for (id, r) in latest {
            let key = (r.strata["job_family"].clone(), r.strata["site"].clone(), positive.contains(id));
            strata.entry(key).or_default().push(id);
        }
        for (key, members) in strata {
            let mut counts = [0usize; 3];
            for id in &members {
                counts[s.fold_of_employee[*id].index()] += 1;
            }
            let n = members.len();
            if n < 3 {
                ensure(counts == [n, 0, 0], || format!("panel {p}: small stratum {key:?} split {counts:?}"))?;
                continue;
            }
            for (k, f) in fractions.as_array().iter().enumerate() {
                let q = n as f64 * f;
                ensure(counts[k] >= q.floor() as usize && counts[k] <= q.ceil() as usize, || {
                    format!("panel {p}: stratum {key:?} counts {counts:?} outside quota bounds")
                })?;
            }
            ensure(counts == largest_remainder(n, &fractions.as_array()), || {
                format!("panel {p}: stratum {key:?} counts {counts:?} differ from largest remainder")
            })?;
        }

        let again = group_stratified_split(&panel, fractions, &keys, seed).map_err(|e| e.to_string())?;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        s.write_csv(&mut a).map_err(|e| e.to_string())?;
        again.write_csv(&mut b).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("panel {p}: assignment not reproducible"))?;
    }
    Ok(format!("{panels} random panels"))
}

fn leakage_audit_check() -> Outcome {
    let d = |s: &str| NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap();
    let spec = PanelSpec {
        prediction_month: common::month("2024-03"),
        horizon_months: 3,
        lookback_months: 12,
        outcome_type: OutcomeType::TotalAttrition,
    };
    let columns = vec![Column {
        name: "tenure".into(),
        kind: ColumnKind::Numeric,
    }];
    // Snapshots run through November 2023; "B" leaves in May 2023.
    let mut rows = Vec::new();
    for (id, last) in [("A", "2023-11"), ("B", "2023-04"), ("C", "2023-11")] {
        let mut m = common::month("2023-01");
        while m <= common::month(last) {
            rows.push(SnapshotRow {
                employee_id: id.into(),
                snapshot_date: m.last_day(),
                values: vec![Value::Num(m.month() as f64)],
            });
            m = m.add_months(1);
        }
    }
    let snapshots = SnapshotTable::new(columns, rows).map_err(|e| e.to_string())?;
    let events = EventTable::new(vec![Event {
        employee_id: "B".into(),
        event_date: d("2023-05-15"),
        event_type: EventType::TerminationRegretted,
    }])
    .map_err(|e| e.to_string())?;
    let extraction = d("2024-02-29");
    let clean = build_panel(&snapshots, &events, &spec, &[]).map_err(|e| e.to_string())?;
    let clean_report = leakage_audit(&clean, extraction);
    ensure(clean_report.is_empty(), || format!("clean panel flagged: {clean_report:?}"))?;

    let mut corrupted = clean.clone();
    let template = corrupted.rows[0].clone();
    // (a) label window ends 2024-03-31, after the extraction date.
    corrupted.rows.push(PanelRow {
        employee_id: "C".into(),
        snapshot_date: d("2023-12-31"),
        ..template.clone()
    });
    // (b) one month after B's termination.
    corrupted.rows.push(PanelRow {
        employee_id: "B".into(),
        snapshot_date: d("2023-06-30"),
        ..template
    });
    let report = leakage_audit(&corrupted, extraction);
    let got: Vec<(ViolationKind, &str, NaiveDate)> = report
        .iter()
        .map(|v| (v.violation_kind, v.employee_id.as_str(), v.snapshot_date))
        .collect();
    let want = vec![
        (ViolationKind::UnresolvableLabel, "C", d("2023-12-31")),
        (ViolationKind::PostTermination, "B", d("2023-06-30")),
    ];
    ensure(got == want, || format!("expected {want:?}, got {got:?}"))?;
    Ok(format!("clean panel of {} rows passes; corrupted panel yields exactly 2 violations", clean.rows.len()))
}

struct Dataset {
    name: &'static str,
    x: Matrix,
    y: Vec<u8>,
    weights: WeightScheme,
}

fn capability_datasets() -> Vec<Dataset> {
    let mut out = Vec::new();
    let bool_rows: Vec<Vec<f64>> = (0..64).map(|c| (0..6).map(|b| ((c >> b) & 1) as f64).collect()).collect();
    let vote = [1.0, 2.0, 3.0, 1.0, 2.0, 1.0];
    let threshold = bool_rows
        .iter()
        .map(|r| (r.iter().zip(&vote).map(|(b, w)| b * w).sum::<f64>() >= 5.0) as u8)
        .collect();
    out.push(Dataset {
        name: "weighted vote over 6 bits",
        x: Matrix::from_rows(&bool_rows).unwrap(),
        y: threshold,
        weights: WeightScheme::None,
    });
    let nibbles: Vec<Vec<f64>> = (0..16).map(|c| (0..4).map(|b| ((c >> b) & 1) as f64).collect()).collect();
    let parity = nibbles.iter().map(|r| (r.iter().sum::<f64>() as u32 % 2) as u8).collect();
    out.push(Dataset {
        name: "parity of 4 bits",
        x: Matrix::from_rows(&nibbles).unwrap(),
        y: parity,
        weights: WeightScheme::None,
    });
    let grid: Vec<Vec<f64>> = (0..256).map(|i| vec![(i % 16) as f64, (i / 16) as f64]).collect();
    let checker = grid.iter().map(|r| (((r[0] as u32 / 4) + (r[1] as u32 / 4)) % 2) as u8).collect();
    out.push(Dataset {
        name: "4x4-tile checkerboard",
        x: Matrix::from_rows(&grid).unwrap(),
        y: checker,
        weights: WeightScheme::None,
    });
    let shifted_xor = grid.iter().map(|r| ((r[0] < 5.0) != (r[1] < 11.0)) as u8).collect();
    out.push(Dataset {
        name: "shifted XOR on a 16x16 grid",
        x: Matrix::from_rows(&grid).unwrap(),
        y: shifted_xor,
        weights: WeightScheme::None,
    });
    let disk = grid.iter().map(|r| ((r[0] - 7.5).powi(2) + (r[1] - 7.5).powi(2) < 30.0) as u8).collect();
    out.push(Dataset {
        name: "disk on a 16x16 grid",
        x: Matrix::from_rows(&grid).unwrap(),
        y: disk,
        weights: WeightScheme::None,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let random_labels: Vec<u8> = (0..256).map(|_| rng.random_bool(0.5) as u8).collect();
    out.push(Dataset {
        name: "random labels on a 16x16 grid",
        x: Matrix::from_rows(&grid).unwrap(),
        y: random_labels,
        weights: WeightScheme::None,
    });
    let pts: Vec<Vec<f64>> = (0..200).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
    let rare = pts.iter().map(|r| (r[0] + r[1] > 1.5 || r[2] < 0.05) as u8).collect();
    out.push(Dataset {
        name: "rare class, balanced weights",
        x: Matrix::from_rows(&pts).unwrap(),
        y: rare,
        weights: WeightScheme::Balanced,
    });
    let with_missing: Vec<Vec<f64>> = (0..120)
        .map(|i| vec![if i % 3 == 0 { f64::NAN } else { (i % 40) as f64 }, (i / 40) as f64])
        .collect();
    let y = with_missing
        .iter()
        .map(|r| if r[0].is_nan() { (r[1] == 1.0) as u8 } else { (r[0] >= 20.0) as u8 })
        .collect();
    out.push(Dataset {
        name: "missing values carry signal",
        x: Matrix::from_rows(&with_missing).unwrap(),
        y,
        weights: WeightScheme::None,
    });
    out
}

fn gbdt_capability() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut details = Vec::new();
    for ds in capability_datasets() {
        let params = GbdtParams {
            num_leaves: 31,
            learning_rate: 0.3,
            n_estimators: 300,
            min_data_in_leaf: 1,
            lambda_l2: 1e-3,
            early_stopping_rounds: 0,
            class_weight: ds.weights,
            ..Default::default()
        };
        let names = (0..ds.x.n_cols()).map(|j| format!("f{j}")).collect();
        let (model, log) = train_gbdt(
            TrainData {
                features: &ds.x,
                labels: &ds.y,
                weights: None,
            },
            None,
            &params,
            names,
        )
        .map_err(|e| format!("{}: {e}", ds.name))?;
        let (margins, probs) = model.predict(&ds.x).map_err(|e| e.to_string())?;
        let plain = weighted_log_loss(&margins, &ds.y, &vec![1.0; ds.y.len()]);
        ensure(plain < 0.01, || format!("{}: training log-loss {plain}", ds.name))?;
        let mut prev = log.initial_train_loss;
        for r in &log.rounds {
            ensure(r.train_loss <= prev + 1e-9, || {
                format!("{}: loss rose from {prev} to {} at round {}", ds.name, r.train_loss, r.round)
            })?;
            prev = r.train_loss;
        }
        let path = dir.path().join("model.json");
        model.save(&path).map_err(|e| e.to_string())?;
        let loaded = GbdtModel::load(&path).map_err(|e| e.to_string())?;
        let (_, reloaded) = loaded.predict(&ds.x).map_err(|e| e.to_string())?;
        let dev = probs.iter().zip(&reloaded).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(dev <= 1e-12, || format!("{}: reloaded predictions differ by {dev:e}", ds.name))?;
        details.push(format!("{} {plain:.1e}", ds.name));
    }
    Ok(format!("log-loss: {}", details.join(", ")))
}

fn org() -> SynthConfig {
    SynthConfig {
        n_employees: 10_000,
        n_months: 24,
        start_month: common::month("2022-01"),
        base_rate: 0.08,
        seed: 11,
        ..Default::default()
    }
}

fn metrics_of(dir: &Path) -> Result<MetricsFile, String> {
    let text = std::fs::read_to_string(dir.join("metrics.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn signal_recovery(manifest: &RunManifest, elapsed: Duration) -> Outcome {
    within(elapsed, Duration::from_secs(300))?;
    let full = manifest.summary.test_auc_pr_full.ok_or("no full-model test AUC-PR")?;
    let base = manifest.summary.test_auc_pr_baseline.ok_or("no baseline test AUC-PR")?;
    ensure(full - base >= 0.05, || format!("full {full:.4} vs baseline {base:.4}"))?;
    let shap = manifest.summary.shap.as_ref().ok_or("no SHAP summary")?;
    let mut signs = Vec::new();
    for (driver, coef) in planted_coefficients() {
        let corr = shap.value_phi_correlation.get(&driver).copied().flatten();
        let corr = corr.ok_or_else(|| format!("no SHAP correlation for {driver}"))?;
        ensure(corr.signum() == coef.signum(), || {
            format!("{driver}: planted {coef:+}, SHAP correlation {corr:+.3}")
        })?;
        signs.push(format!("{driver} {corr:+.2}"));
    }
    Ok(format!(
        "AUC-PR full {full:.4} vs baseline {base:.4}; {}; run {elapsed:.1?}",
        signs.join(", ")
    ))
}

fn calibration_effect(root: &Path) -> Outcome {
    let mut config = common::synthetic_setup(&root.join("c8"), &org());
    config.imbalance.downsample_ratio = Some(1.0);
    config.imbalance.class_weights = WeightScheme::None;
    run_pipeline(&config, Stage::Evaluate).map_err(|e| e.to_string())?;
    let m = metrics_of(&config.output_dir)?;
    let test = &m.models["full"].folds[&Fold::Test];
    let cal = test.calibrated.as_ref().ok_or("no calibrated test metrics")?;
    let (raw, iso) = (test.uncalibrated.brier, cal.brier);
    ensure(iso < raw, || format!("calibrated Brier {iso} not below uncalibrated {raw}"))?;
    let (a, b) = (test.uncalibrated.auc_roc.ok_or("no AUC-ROC")?, cal.auc_roc.ok_or("no AUC-ROC")?);
    ensure((a - b).abs() <= 1e-9, || format!("AUC-ROC moved from {a} to {b}"))?;
    Ok(format!("Brier {raw:.4} -> {iso:.4}; AUC-ROC {a:.6} vs {b:.6}"))
}

fn cost_sensitive(root: &Path, weighted: &MetricsFile) -> Outcome {
    let mut config = common::synthetic_setup(&root.join("c9"), &org());
    config.imbalance.class_weights = WeightScheme::None;
    run_pipeline(&config, Stage::Evaluate).map_err(|e| e.to_string())?;
    let unweighted = metrics_of(&config.output_dir)?;
    let recall = |m: &MetricsFile| m.models["full"].folds[&Fold::Test].uncalibrated.at_threshold.recall;
    let (with, without) = (recall(weighted), recall(&unweighted));
    ensure(with > without, || format!("recall {with:.4} with weights vs {without:.4} without"))?;
    Ok(format!("recall@0.5 {with:.4} balanced vs {without:.4} unweighted"))
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    for file in ["metrics.json", "model_full.json", "model_baseline.json"] {
        let a = std::fs::read(first.join(file)).map_err(|e| e.to_string())?;
        let b = std::fs::read(second.join(file)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{file} differs between runs"))?;
    }
    Ok("metrics.json, model_full.json and model_baseline.json byte-identical".into())
}

fn report(results: &mut Vec<bool>, n: usize, name: &str, outcome: Outcome) {
    match outcome {
        Ok(detail) => {
            println!("criterion {n:>2} PASS  {name}: {detail}");
            results.push(true);
        }
        Err(detail) => {
            println!("criterion {n:>2} FAIL  {name}: {detail}");
            results.push(false);
        }
    }
}

fn main() {
    let mut results = Vec::new();
    report(&mut results, 1, "metric oracles", metric_oracles());
    report(&mut results, 2, "PAVA correctness", pava_correctness());

    let root = tempfile::tempdir().expect("temp dir");
    let config = common::synthetic_setup(&root.path().join("main"), &org());
    let start = Instant::now();
    let main_run = run_pipeline(&config, Stage::Report);
    let elapsed = start.elapsed();

    match &main_run {
        Ok(m) => report(&mut results, 3, "SHAP oracle equivalence", shap_oracle(m)),
        Err(e) => report(&mut results, 3, "SHAP oracle equivalence", Err(format!("pipeline failed: {e}"))),
    }
    report(&mut results, 4, "split guarantees", split_guarantees());
    report(&mut results, 5, "leakage audit", leakage_audit_check());
    report(&mut results, 6, "GBDT capability", gbdt_capability());
    match &main_run {
        Ok(m) => report(&mut results, 7, "end-to-end signal recovery", signal_recovery(m, elapsed)),
        Err(e) => report(&mut results, 7, "end-to-end signal recovery", Err(format!("pipeline failed: {e}"))),
    }
    report(&mut results, 8, "calibration effect", calibration_effect(root.path()));
    let weighted = metrics_of(&config.output_dir);
    report(
        &mut results,
        9,
        "cost-sensitive weighting",
        weighted.and_then(|w| cost_sensitive(root.path(), &w)),
    );
    let mut again = config.clone();
    again.output_dir = root.path().join("main_again");
    let rerun = run_pipeline(&again, Stage::Report).map_err(|e| e.to_string());
    report(
        &mut results,
        10,
        "determinism",
        rerun.and_then(|_| determinism(&config.output_dir, &again.output_dir)),
    );

    let passed = results.iter().filter(|ok| **ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
