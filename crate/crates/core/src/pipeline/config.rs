use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::calibrate::CalibrationKind;
use crate::error::{Error, Result};
use crate::features::{FeaturePlan, WeightScheme};
use crate::gbdt::{GbdtParams, ParamGrid};
use crate::ingest::Schema;
use crate::panel::PanelSpec;
use crate::split::Fractions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputsConfig {
    pub snapshots: PathBuf,
    pub events: PathBuf,
    pub schema: Schema,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub fractions: Fractions,
    pub strata_keys: Vec<String>,
}

fn default_k() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoteConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    pub n_synthetic: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImbalanceConfig {
    /// Per-class sample weights for training; overrides `gbdt.class_weight`.
    pub class_weights: WeightScheme,
    /// Keep all training positives and enough negatives for this positive:negative ratio.
    pub downsample_ratio: Option<f64>,
    pub smote: Option<SmoteConfig>,
}

impl Default for ImbalanceConfig {
    fn default() -> Self {
        ImbalanceConfig {
            class_weights: WeightScheme::Balanced,
            downsample_ratio: None,
            smote: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub kind: CalibrationKind,
    /// Required by `segment_mean`.
    pub segment_key: Option<String>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            kind: CalibrationKind::Isotonic,
            segment_key: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub threshold: f64,
    pub segment_keys: Vec<String>,
    pub ece_bins: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            threshold: 0.5,
            segment_keys: Vec::new(),
            ece_bins: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub cut_keys: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Test rows explained with SHAP; larger folds are subsampled with the run seed.
    pub max_rows: usize,
    /// Partial dependence is computed for this many top-gain features.
    pub pdp_features: usize,
    pub pdp_grid: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            max_rows: 2000,
            pdp_features: 5,
            pdp_grid: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub inputs: InputsConfig,
    /// Date the input tables were extracted; defaults to the latest snapshot date.
    #[serde(default)]
    pub extraction_date: Option<NaiveDate>,
    pub panel: PanelSpec,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub features: FeaturePlan,
    #[serde(default)]
    pub imbalance: ImbalanceConfig,
    #[serde(default)]
    pub gbdt: GbdtParams,
    /// When present, hyperparameters are chosen by validation AUC-PR of the full model.
    #[serde(default)]
    pub tuning: Option<ParamGrid>,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    pub baseline_features: Vec<String>,
    /// Columns of the full model; defaults to every schema column.
    #[serde(default)]
    pub full_features: Option<Vec<String>>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
    pub output_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("cannot parse pipeline config: {e}")))
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.inputs.snapshots, &mut self.inputs.events, &mut self.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.panel.validate()?;
        self.split.fractions.validate()?;
        self.gbdt.validate()?;
        if !(0.0..=1.0).contains(&self.evaluation.threshold) {
            return Err(Error::Config("evaluation.threshold must be in [0, 1]".into()));
        }
        if self.evaluation.ece_bins == 0 {
            return Err(Error::Config("evaluation.ece_bins must be at least 1".into()));
        }
        if self.baseline_features.is_empty() {
            return Err(Error::Config("baseline_features must not be empty".into()));
        }
        if self.calibration.kind == CalibrationKind::SegmentMean && self.calibration.segment_key.is_none() {
            return Err(Error::Config("segment_mean calibration needs calibration.segment_key".into()));
        }
        if let Some(r) = self.imbalance.downsample_ratio {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::Config("imbalance.downsample_ratio must be positive".into()));
            }
        }
        if self.explain.pdp_grid == 0 {
            return Err(Error::Config("explain.pdp_grid must be at least 1".into()));
        }
        Ok(())
    }

    /// Categorical keys the panel must carry as strata, in first-use order.
    pub fn stratum_keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = Vec::new();
        let all = self
            .split
            .strata_keys
            .iter()
            .chain(&self.evaluation.segment_keys)
            .chain(&self.report.cut_keys)
            .chain(self.calibration.segment_key.iter());
        for k in all {
            if !keys.contains(k) {
                keys.push(k.clone());
            }
        }
        keys
    }
}
