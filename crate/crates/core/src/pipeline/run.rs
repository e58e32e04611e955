use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::PipelineConfig;
use super::report::{aggregate_risk, ScoredRow};
use crate::calibrate::{fit_calibrator, Calibrator};
use crate::error::{Error, Result};
use crate::evaluate::{metrics_report, rate_mape, segment_metrics, MetricsReport};
use crate::explain::{feature_importance, partial_dependence, tree_shap, ImportanceKind};
use crate::features::{downsample_majority, smote_oversample, FeatureTransformer};
use crate::gbdt::{grid_search, train_gbdt, GbdtModel, GbdtParams, TrainData, TrainingLog};
use crate::ingest::load_tables;
use crate::matrix::Matrix;
use crate::panel::{build_panel, leakage_audit, PanelDataset, Violation};
use crate::split::{group_stratified_split, Fold, SplitAssignment};

/// Pipeline stages in execution order; a run can stop after any of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Panel,
    Split,
    Train,
    Calibrate,
    Evaluate,
    Explain,
    Report,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Panel => "panel",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Calibrate => "calibrate",
            Stage::Evaluate => "evaluate",
            Stage::Explain => "explain",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub extraction_date: NaiveDate,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub uncalibrated: MetricsReport,
    /// Only computed on the test fold.
    pub calibrated: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMape {
    /// `None` when no group has a positive realized rate.
    pub mape: Option<f64>,
    pub groups: usize,
    /// Groups left out because their realized rate is zero.
    pub groups_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub folds: BTreeMap<Fold, FoldMetrics>,
    /// Calibrated test metrics per segment key and value.
    pub test_segments: BTreeMap<String, BTreeMap<String, MetricsReport>>,
    /// Group-level calibrated rate error on the test fold, per segment key.
    pub test_rate_mape: BTreeMap<String, RateMape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub models: BTreeMap<String, ModelMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapSummary {
    pub rows_explained: usize,
    /// Largest `|base_value + sum(phi) - margin|` over explained rows.
    pub max_local_accuracy_error: f64,
    /// Pearson correlation between each feature's value and its attribution.
    pub value_phi_correlation: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub test_auc_pr_full: Option<f64>,
    pub test_auc_pr_baseline: Option<f64>,
    pub test_brier_full_uncalibrated: Option<f64>,
    pub test_brier_full_calibrated: Option<f64>,
    pub shap: Option<ShapSummary>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunCounts {
    pub panel_rows: usize,
    pub employees: usize,
    pub positives: usize,
    pub rows_per_fold: BTreeMap<Fold, usize>,
    pub employees_per_fold: BTreeMap<Fold, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub seed: u64,
    pub completed_stage: Stage,
    pub artifacts: Vec<String>,
    pub counts: RunCounts,
    pub split_warnings: Vec<String>,
    pub summary: RunSummary,
    pub config: PipelineConfig,
}

fn at<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage,
            source: Box::new(other),
        },
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn staging_dir(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    out.with_file_name(format!(".{name}.partial"))
}

/// Runs every stage up to and including `until`, writing artifacts to
/// `config.output_dir`.
///
/// Outputs are assembled in a sibling staging directory and moved into place
/// only on success; on failure the staging directory is removed and the
/// error names the failing stage.
pub fn run_pipeline(config: &PipelineConfig, until: Stage) -> Result<RunManifest> {
    at("config", config.validate())?;
    let out = &config.output_dir;
    let staging = staging_dir(out);
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    std::fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    match execute(config, until, &staging) {
        Ok(manifest) => {
            if out.exists() {
                std::fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
            }
            std::fs::rename(&staging, out).map_err(|e| Error::io(out, e))?;
            Ok(manifest)
        }
        Err(e) => {
            if let Err(cleanup) = std::fs::remove_dir_all(&staging) {
                log::warn!("could not remove staging directory {}: {cleanup}", staging.display());
            }
            Err(e)
        }
    }
}

fn config_hash(config: &PipelineConfig) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct FoldData {
    rows: Vec<usize>,
    labels: Vec<u8>,
}

struct ModelRun {
    name: &'static str,
    transformer: FeatureTransformer,
    model: GbdtModel,
    log: TrainingLog,
    /// Feature matrices of the original fold rows, in `Fold::ALL` order.
    matrices: Vec<Matrix>,
    /// Matrix the model was fitted on, after any resampling.
    train_fit: Matrix,
    probs: Vec<Vec<f64>>,
    calibrator: Option<Calibrator>,
    test_calibrated: Option<Vec<f64>>,
}

struct Context<'a> {
    config: &'a PipelineConfig,
    dir: &'a Path,
    panel: PanelDataset,
    folds: Vec<FoldData>,
    seed: u64,
}

impl Context<'_> {
    fn fold(&self, f: Fold) -> &FoldData {
        &self.folds[f as usize]
    }

    fn strata_of(&self, rows: &[usize], key: &str) -> Vec<String> {
        rows.iter().map(|&i| self.panel.rows[i].strata[key].clone()).collect()
    }

    fn training_set(&self, transformer: &FeatureTransformer) -> Result<(Matrix, Vec<u8>)> {
        let train = self.fold(Fold::Train);
        let imbalance = &self.config.imbalance;
        let rows: Vec<usize> = match imbalance.downsample_ratio {
            Some(ratio) => downsample_majority(&train.labels, ratio, self.seed)?
                .into_iter()
                .map(|k| train.rows[k])
                .collect(),
            None => train.rows.clone(),
        };
        let mut x = transformer.transform(&self.panel, &rows);
        let mut y: Vec<u8> = rows.iter().map(|&i| self.panel.rows[i].label).collect();
        if let Some(sm) = &imbalance.smote {
            let positives: Vec<Vec<f64>> = (0..x.n_rows()).filter(|&i| y[i] == 1).map(|i| x.row(i).to_vec()).collect();
            let synthetic = smote_oversample(&positives, sm.k, sm.n_synthetic, self.seed)?;
            x.append_rows(&synthetic)?;
            y.extend(std::iter::repeat_n(1u8, synthetic.len()));
        }
        Ok((x, y))
    }

    fn fit_model(&self, name: &'static str, columns: &[String], params: &GbdtParams) -> Result<ModelRun> {
        let transformer = at(
            "features",
            FeatureTransformer::fit(&self.panel, &self.fold(Fold::Train).rows, columns, &self.config.features),
        )?;
        let matrices: Vec<Matrix> = Fold::ALL
            .iter()
            .map(|f| transformer.transform(&self.panel, &self.fold(*f).rows))
            .collect();
        let (x, y) = at("features", self.training_set(&transformer))?;
        let valid = self.fold(Fold::Valid);
        let (model, log) = at(
            "train",
            train_gbdt(
                TrainData {
                    features: &x,
                    labels: &y,
                    weights: None,
                },
                Some((&matrices[Fold::Valid as usize], &valid.labels)),
                params,
                transformer.feature_names.clone(),
            ),
        )?;
        log::info!(
            "{name} model: {} trees kept of {} rounds, best valid AUC-PR {:?}",
            log.best_n_trees,
            log.rounds.len(),
            log.best_valid_metric
        );
        let probs = matrices
            .iter()
            .map(|m| model.predict(m).map(|p| p.1))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelRun {
            name,
            transformer,
            model,
            log,
            matrices,
            train_fit: x,
            probs,
            calibrator: None,
            test_calibrated: None,
        })
    }

    fn calibrate(&self, run: &mut ModelRun) -> Result<()> {
        let cfg = &self.config.calibration;
        let valid = self.fold(Fold::Valid);
        let segments = cfg.segment_key.as_ref().map(|k| self.strata_of(&valid.rows, k));
        let cal = fit_calibrator(
            cfg.kind,
            &run.probs[Fold::Valid as usize],
            &valid.labels,
            segments.as_deref(),
            Fold::Valid,
        )?;
        let test = self.fold(Fold::Test);
        let test_segments = cfg.segment_key.as_ref().map(|k| self.strata_of(&test.rows, k));
        run.test_calibrated = Some(cal.apply_for_evaluation(
            &run.probs[Fold::Test as usize],
            test_segments.as_deref(),
            Fold::Test,
        )?);
        run.calibrator = Some(cal);
        Ok(())
    }

    fn evaluate(&self, run: &ModelRun) -> Result<ModelMetrics> {
        let ev = &self.config.evaluation;
        let mut folds = BTreeMap::new();
        for f in Fold::ALL {
            let fd = self.fold(f);
            if fd.rows.is_empty() {
                continue;
            }
            let uncalibrated = metrics_report(&run.probs[f as usize], &fd.labels, ev.threshold, ev.ece_bins)?;
            let calibrated = match (f, &run.test_calibrated) {
                (Fold::Test, Some(p)) => Some(metrics_report(p, &fd.labels, ev.threshold, ev.ece_bins)?),
                _ => None,
            };
            folds.insert(f, FoldMetrics { uncalibrated, calibrated });
        }
        let mut test_segments = BTreeMap::new();
        let mut test_rate_mape = BTreeMap::new();
        let test = self.fold(Fold::Test);
        if let (Some(cal), false) = (&run.test_calibrated, test.rows.is_empty()) {
            for key in &ev.segment_keys {
                let segs = self.strata_of(&test.rows, key);
                test_segments.insert(key.clone(), segment_metrics(cal, &test.labels, &segs, ev.threshold, ev.ece_bins)?);
                let mut groups: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
                for ((p, y), s) in cal.iter().zip(&test.labels).zip(&segs) {
                    let g = groups.entry(s.as_str()).or_default();
                    g.0 += p;
                    g.1 += *y as f64;
                    g.2 += 1;
                }
                let (mut predicted, mut actual) = (Vec::new(), Vec::new());
                for (p, y, n) in groups.values() {
                    if *y > 0.0 {
                        predicted.push(p / *n as f64);
                        actual.push(y / *n as f64);
                    }
                }
                test_rate_mape.insert(
                    key.clone(),
                    RateMape {
                        mape: if actual.is_empty() { None } else { Some(rate_mape(&predicted, &actual)?) },
                        groups: groups.len(),
                        groups_excluded: groups.len() - actual.len(),
                    },
                );
            }
        }
        Ok(ModelMetrics {
            folds,
            test_segments,
            test_rate_mape,
        })
    }

    fn explain(&self, run: &ModelRun) -> Result<ShapSummary> {
        let cfg = &self.config.explain;
        let test = self.fold(Fold::Test);
        let x_test = &run.matrices[Fold::Test as usize];
        let picked: Vec<usize> = if test.rows.len() > cfg.max_rows {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(1);
            let mut idx = rand::seq::index::sample(&mut rng, test.rows.len(), cfg.max_rows).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..test.rows.len()).collect()
        };
        let x = x_test.select_rows(&picked);
        let names = &run.model.feature_names;

        let mut shap_out = csv::Writer::from_path(self.dir.join("shap.csv"))?;
        shap_out.write_record(["employee_id", "snapshot_date", "feature", "value", "phi", "base_value", "margin"])?;
        let mut max_err: f64 = 0.0;
        let mut pairs: Vec<Vec<(f64, f64)>> = vec![Vec::new(); names.len()];
        for (k, &pos) in picked.iter().enumerate() {
            let row = x.row(k);
            let e = tree_shap(&run.model, row)?;
            let margin = run.model.margin_row(row);
            max_err = max_err.max((e.reconstructed_margin - margin).abs());
            let panel_row = &self.panel.rows[test.rows[pos]];
            let date = panel_row.snapshot_date.to_string();
            for (j, name) in names.iter().enumerate() {
                let value = if row[j].is_nan() { String::new() } else { row[j].to_string() };
                shap_out.write_record([
                    panel_row.employee_id.as_str(),
                    &date,
                    name,
                    &value,
                    &e.phi[j].to_string(),
                    &e.base_value.to_string(),
                    &margin.to_string(),
                ])?;
                if row[j].is_finite() {
                    pairs[j].push((row[j], e.phi[j]));
                }
            }
        }
        shap_out.flush().map_err(|e| Error::io(self.dir.join("shap.csv"), e))?;

        let importance = feature_importance(&run.model, ImportanceKind::Gain);
        importance.write_csv_path(&self.dir.join("importance.csv"))?;

        let mut pdp_out = csv::Writer::from_path(self.dir.join("pdp.csv"))?;
        pdp_out.write_record(["feature", "grid", "mean_margin"])?;
        if x.n_rows() > 0 {
            for r in importance.ranked().into_iter().filter(|r| r.gain > 0.0).take(cfg.pdp_features) {
                let j = names.iter().position(|n| *n == r.feature).expect("importance rows follow model features");
                let grid = quantile_grid(run.train_fit.column(j), cfg.pdp_grid);
                if grid.is_empty() {
                    continue;
                }
                for (g, m) in partial_dependence(&run.model, j, &grid, &x)? {
                    pdp_out.write_record([r.feature.as_str(), &g.to_string(), &m.to_string()])?;
                }
            }
        }
        pdp_out.flush().map_err(|e| Error::io(self.dir.join("pdp.csv"), e))?;

        Ok(ShapSummary {
            rows_explained: picked.len(),
            max_local_accuracy_error: max_err,
            value_phi_correlation: names.iter().cloned().zip(pairs.iter().map(|p| pearson(p))).collect(),
        })
    }

    fn write_predictions(&self, run: &ModelRun) -> Result<()> {
        let path = self.dir.join(format!("predictions_{}.csv", run.name));
        let mut out = csv::Writer::from_path(&path)?;
        out.write_record(["employee_id", "snapshot_date", "fold", "label", "probability", "calibrated"])?;
        for f in Fold::ALL {
            for (k, &i) in self.fold(f).rows.iter().enumerate() {
                let r = &self.panel.rows[i];
                let calibrated = match (f, &run.test_calibrated) {
                    (Fold::Test, Some(c)) => c[k].to_string(),
                    _ => String::new(),
                };
                out.write_record([
                    r.employee_id.as_str(),
                    &r.snapshot_date.to_string(),
                    f.as_str(),
                    &r.label.to_string(),
                    &run.probs[f as usize][k].to_string(),
                    &calibrated,
                ])?;
            }
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    fn report(&self, run: &ModelRun) -> Result<()> {
        let keys = &self.config.report.cut_keys;
        let test = self.fold(Fold::Test);
        let probs = run
            .test_calibrated
            .as_ref()
            .ok_or_else(|| Error::Validation("risk report needs calibrated test probabilities".into()))?;
        let rows: Vec<ScoredRow> = test
            .rows
            .iter()
            .zip(probs)
            .map(|(&i, &p)| {
                let r = &self.panel.rows[i];
                ScoredRow {
                    employee_id: r.employee_id.clone(),
                    snapshot_date: r.snapshot_date,
                    cut_values: keys.iter().map(|k| r.strata[k].clone()).collect(),
                    probability: p,
                    label: Some(r.label),
                }
            })
            .collect();
        aggregate_risk(&rows, keys)?.write_csv_path(&self.dir.join("risk_report.csv"))
    }
}

/// Evenly spaced empirical quantiles of the finite values, duplicates removed.
fn quantile_grid(values: impl Iterator<Item = f64>, n: usize) -> Vec<f64> {
    let mut xs: Vec<f64> = values.filter(|v| v.is_finite()).collect();
    if xs.is_empty() {
        return Vec::new();
    }
    xs.sort_by(f64::total_cmp);
    let mut grid: Vec<f64> = (0..n)
        .map(|k| {
            let q = if n == 1 { 0.5 } else { k as f64 / (n - 1) as f64 };
            let pos = q * (xs.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            xs[lo] + (pos - lo as f64) * (xs[hi] - xs[lo])
        })
        .collect();
    grid.dedup();
    grid
}

fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < 3 {
        return None;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn counts(panel: &PanelDataset, split: Option<&SplitAssignment>) -> RunCounts {
    let latest = panel.latest_row_per_employee();
    let mut c = RunCounts {
        panel_rows: panel.rows.len(),
        employees: latest.len(),
        positives: panel.rows.iter().filter(|r| r.label == 1).count(),
        ..Default::default()
    };
    if let Some(s) = split {
        for f in Fold::ALL {
            c.rows_per_fold.insert(f, s.rows_in(panel, f).len());
            c.employees_per_fold.insert(f, s.fold_of_employee.values().filter(|x| **x == f).count());
        }
    }
    c
}

fn execute(config: &PipelineConfig, until: Stage, dir: &Path) -> Result<RunManifest> {
    let seed = config.seed;
    let mut manifest = RunManifest {
        config_sha256: config_hash(config)?,
        seed,
        completed_stage: Stage::Panel,
        artifacts: Vec::new(),
        counts: RunCounts::default(),
        split_warnings: Vec::new(),
        summary: RunSummary::default(),
        config: config.clone(),
    };

    let (snapshots, events) = at(
        "ingest",
        load_tables(&config.inputs.snapshots, &config.inputs.events, &config.inputs.schema),
    )?;
    let panel = at(
        "panel",
        build_panel(&snapshots, &events, &config.panel, &config.stratum_keys()),
    )?;
    at("panel", panel.write_csv_path(&dir.join("panel.csv")))?;
    let extraction_date = match config.extraction_date.or(snapshots.latest_date()) {
        Some(d) => d,
        None => return Err(at("audit", Err(Error::Validation("snapshot table is empty".into())))?),
    };
    let violations = leakage_audit(&panel, extraction_date);
    let n_violations = violations.len();
    write_json(
        &dir.join("audit.json"),
        &AuditReport {
            extraction_date,
            violations,
        },
    )?;
    if n_violations > 0 {
        return Err(at(
            "audit",
            Err(Error::Validation(format!(
                "leakage audit found {n_violations} violation(s) at extraction date {extraction_date}"
            ))),
        )?);
    }
    manifest.counts = counts(&panel, None);
    if until == Stage::Panel {
        return finish(manifest, dir);
    }

    let split = at(
        "split",
        group_stratified_split(&panel, config.split.fractions, &config.split.strata_keys, seed),
    )?;
    for w in &split.warnings {
        log::warn!("{w}");
    }
    at("split", split.write_csv_path(&dir.join("split.csv")))?;
    manifest.counts = counts(&panel, Some(&split));
    manifest.split_warnings = split.warnings.clone();
    manifest.completed_stage = Stage::Split;
    if until == Stage::Split {
        return finish(manifest, dir);
    }

    let folds = Fold::ALL
        .iter()
        .map(|f| {
            let rows = split.rows_in(&panel, *f);
            let labels = rows.iter().map(|&i| panel.rows[i].label).collect();
            FoldData { rows, labels }
        })
        .collect();
    let ctx = Context {
        config,
        dir,
        panel,
        folds,
        seed,
    };

    let full_columns: Vec<String> = config
        .full_features
        .clone()
        .unwrap_or_else(|| ctx.panel.columns.iter().map(|c| c.name.clone()).collect());
    for c in full_columns.iter().chain(&config.baseline_features) {
        if ctx.panel.column_index(c).is_none() {
            return Err(at(
                "features",
                Err(Error::Config(format!("feature column {c:?} is not in the snapshot schema"))),
            )?);
        }
    }

    let mut params = config.gbdt.clone();
    params.seed = seed;
    params.class_weight = config.imbalance.class_weights;
    if let Some(grid) = &config.tuning {
        let transformer = at(
            "features",
            FeatureTransformer::fit(&ctx.panel, &ctx.fold(Fold::Train).rows, &full_columns, &config.features),
        )?;
        let (x, y) = at("features", ctx.training_set(&transformer))?;
        let valid = ctx.fold(Fold::Valid);
        let x_valid = transformer.transform(&ctx.panel, &valid.rows);
        let result = at(
            "train",
            grid_search(
                TrainData {
                    features: &x,
                    labels: &y,
                    weights: None,
                },
                (&x_valid, &valid.labels),
                &params,
                grid,
                &transformer.feature_names,
            ),
        )?;
        write_json(&dir.join("tuning.json"), &result)?;
        params = result.best;
    }

    let mut runs = vec![
        ctx.fit_model("full", &full_columns, &params)?,
        ctx.fit_model("baseline", &config.baseline_features, &params)?,
    ];
    for run in &runs {
        run.model.save(&dir.join(format!("model_{}.json", run.name)))?;
        write_json(&dir.join(format!("training_log_{}.json", run.name)), &run.log)?;
        write_json(&dir.join(format!("features_{}.json", run.name)), &run.transformer)?;
    }
    manifest.completed_stage = Stage::Train;
    if until == Stage::Train {
        return finish(manifest, dir);
    }

    for run in runs.iter_mut() {
        at("calibrate", ctx.calibrate(run))?;
        let file = if run.name == "full" {
            "calibrator.json".to_string()
        } else {
            format!("calibrator_{}.json", run.name)
        };
        write_json(&dir.join(file), run.calibrator.as_ref().expect("calibrated above"))?;
    }
    manifest.completed_stage = Stage::Calibrate;
    if until == Stage::Calibrate {
        return finish(manifest, dir);
    }

    let mut metrics = MetricsFile {
        models: BTreeMap::new(),
    };
    for run in &runs {
        metrics.models.insert(run.name.to_string(), at("evaluate", ctx.evaluate(run))?);
        at("evaluate", ctx.write_predictions(run))?;
    }
    write_json(&dir.join("metrics.json"), &metrics)?;
    let test_of = |name: &str| metrics.models[name].folds.get(&Fold::Test);
    manifest.summary.test_auc_pr_full = test_of("full").and_then(|m| m.uncalibrated.auc_pr);
    manifest.summary.test_auc_pr_baseline = test_of("baseline").and_then(|m| m.uncalibrated.auc_pr);
    manifest.summary.test_brier_full_uncalibrated = test_of("full").map(|m| m.uncalibrated.brier);
    manifest.summary.test_brier_full_calibrated = test_of("full").and_then(|m| m.calibrated.as_ref().map(|c| c.brier));
    manifest.completed_stage = Stage::Evaluate;
    if until == Stage::Evaluate {
        return finish(manifest, dir);
    }

    manifest.summary.shap = Some(at("explain", ctx.explain(&runs[0]))?);
    manifest.completed_stage = Stage::Explain;
    if until == Stage::Explain {
        return finish(manifest, dir);
    }

    at("report", ctx.report(&runs[0]))?;
    manifest.completed_stage = Stage::Report;
    finish(manifest, dir)
}

fn finish(mut manifest: RunManifest, dir: &Path) -> Result<RunManifest> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    names.push("manifest.json".into());
    names.sort();
    manifest.artifacts = names;
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
