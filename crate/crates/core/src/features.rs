//! Categorical encoders, imputers and class-imbalance treatments.
//!
//! Everything here is fitted on training-fold rows only and is total at apply
//! time: unseen categories and missing values always map to defined numbers.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hasher;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ingest::{ColumnKind, Value};
use crate::matrix::Matrix;
use crate::panel::PanelDataset;

/// Category used for missing categorical values.
pub const MISSING_CATEGORY: &str = "\u{2400}MISSING";

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn category_of(column: &str, v: &Value) -> Result<String> {
    match v {
        Value::Cat(s) => Ok(s.clone()),
        Value::Missing => Ok(MISSING_CATEGORY.to_string()),
        Value::Num(x) => Err(invalid!("column {column:?} is categorical but holds number {x}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMethod {
    OneHot,
    Ordinal,
    Hash,
    Target,
}

fn default_smoothing() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_buckets: Option<usize>,
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<Vec<String>>,
}

impl Default for EncoderOptions {
    fn default() -> Self {
        EncoderOptions {
            n_buckets: None,
            smoothing: default_smoothing(),
            order: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum EncoderState {
    OneHot { categories: Vec<String> },
    Ordinal { ranks: BTreeMap<String, f64> },
    Hash { n_buckets: usize },
    Target { means: BTreeMap<String, f64>, prior: f64, smoothing: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub source_column: String,
    pub state: EncoderState,
    pub output_feature_names: Vec<String>,
}

pub fn fit_encoder(
    column: &str,
    values: &[Value],
    labels: Option<&[u8]>,
    method: EncoderMethod,
    options: &EncoderOptions,
) -> Result<Encoder> {
    let cats = values
        .iter()
        .map(|v| category_of(column, v))
        .collect::<Result<Vec<_>>>()?;
    let (state, names) = match method {
        EncoderMethod::OneHot => {
            let mut categories = cats.clone();
            categories.sort();
            categories.dedup();
            let names = categories.iter().map(|c| format!("{column}={c}")).collect();
            (EncoderState::OneHot { categories }, names)
        }
        EncoderMethod::Ordinal => {
            let ranks = match &options.order {
                Some(order) => order
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (c.clone(), i as f64))
                    .collect(),
                None => {
                    let mut distinct = cats.clone();
                    distinct.sort();
                    distinct.dedup();
                    distinct
                        .into_iter()
                        .enumerate()
                        .map(|(i, c)| (c, i as f64))
                        .collect()
                }
            };
            (EncoderState::Ordinal { ranks }, vec![column.to_string()])
        }
        EncoderMethod::Hash => {
            let n_buckets = options
                .n_buckets
                .ok_or_else(|| invalid!("hash encoder for {column:?} needs n_buckets"))?;
            if n_buckets < 1 {
                return Err(invalid!("hash encoder for {column:?}: n_buckets must be at least 1"));
            }
            let names = (0..n_buckets).map(|b| format!("{column}#{b}")).collect();
            (EncoderState::Hash { n_buckets }, names)
        }
        EncoderMethod::Target => {
            let labels =
                labels.ok_or_else(|| invalid!("target encoder for {column:?} needs labels"))?;
            if labels.len() != cats.len() {
                return Err(invalid!("target encoder: {} labels for {} values", labels.len(), cats.len()));
            }
            if labels.is_empty() {
                return Err(invalid!("target encoder for {column:?}: no training rows"));
            }
            let m = options.smoothing;
            if !(m.is_finite() && m >= 0.0) {
                return Err(invalid!("target encoder smoothing must be non-negative"));
            }
            let prior = labels.iter().map(|&y| y as f64).sum::<f64>() / labels.len() as f64;
            let mut acc: BTreeMap<String, (f64, f64)> = BTreeMap::new();
            for (c, &y) in cats.iter().zip(labels) {
                let e = acc.entry(c.clone()).or_default();
                e.0 += y as f64;
                e.1 += 1.0;
            }
            let means = acc
                .into_iter()
                .map(|(c, (sum, n))| (c, (sum + m * prior) / (n + m)))
                .collect();
            (
                EncoderState::Target { means, prior, smoothing: m },
                vec![format!("{column}:target")],
            )
        }
    };
    Ok(Encoder {
        source_column: column.to_string(),
        state,
        output_feature_names: names,
    })
}

impl Encoder {
    pub fn width(&self) -> usize {
        self.output_feature_names.len()
    }

    /// Appends this encoder's outputs for `value` to `out`.
    pub fn apply_into(&self, value: &Value, out: &mut Vec<f64>) {
        let cat: std::borrow::Cow<str> = match value {
            Value::Cat(s) => s.as_str().into(),
            Value::Missing => MISSING_CATEGORY.into(),
            Value::Num(x) => x.to_string().into(),
        };
        match &self.state {
            EncoderState::OneHot { categories } => {
                let hit = categories.binary_search_by(|c| c.as_str().cmp(&cat)).ok();
                out.extend((0..categories.len()).map(|i| if Some(i) == hit { 1.0 } else { 0.0 }));
            }
            EncoderState::Ordinal { ranks } => out.push(ranks.get(cat.as_ref()).copied().unwrap_or(-1.0)),
            EncoderState::Hash { n_buckets } => {
                let b = (fnv1a64(cat.as_bytes()) % *n_buckets as u64) as usize;
                out.extend((0..*n_buckets).map(|i| if i == b { 1.0 } else { 0.0 }));
            }
            EncoderState::Target { means, prior, .. } => {
                out.push(means.get(cat.as_ref()).copied().unwrap_or(*prior))
            }
        }
    }

    pub fn apply(&self, value: &Value) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width());
        self.apply_into(value, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FillValue {
    Num(f64),
    Cat(String),
}

impl FillValue {
    fn to_value(&self) -> Value {
        match self {
            FillValue::Num(x) => Value::Num(*x),
            FillValue::Cat(s) => Value::Cat(s.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeStrategy {
    Median,
    Mean,
    Mode,
    Constant(FillValue),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputer {
    pub source_column: String,
    pub strategy: ImputeStrategy,
    pub fill_value: FillValue,
    pub adds_indicator: bool,
}

pub fn fit_imputer(
    column: &str,
    values: &[Value],
    strategy: ImputeStrategy,
    adds_indicator: bool,
) -> Result<Imputer> {
    let present: Vec<&Value> = values.iter().filter(|v| !v.is_missing()).collect();
    if present.is_empty() && !matches!(strategy, ImputeStrategy::Constant(_)) {
        return Err(invalid!("column {column:?} has no non-missing training values"));
    }
    let numbers = || -> Result<Vec<f64>> {
        present
            .iter()
            .map(|v| v.as_num().ok_or_else(|| invalid!("{strategy:?} imputation needs a numeric column, {column:?} is not")))
            .collect()
    };
    let fill_value = match &strategy {
        ImputeStrategy::Median => {
            let mut xs = numbers()?;
            xs.sort_by(f64::total_cmp);
            let n = xs.len();
            let med = if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) };
            FillValue::Num(med)
        }
        ImputeStrategy::Mean => {
            let xs = numbers()?;
            FillValue::Num(xs.iter().sum::<f64>() / xs.len() as f64)
        }
        ImputeStrategy::Mode => {
            if present.iter().all(|v| v.as_num().is_some()) {
                let mut xs = numbers()?;
                xs.sort_by(f64::total_cmp);
                let mut best = (xs[0], 0usize);
                for run in xs.chunk_by(|a, b| a == b) {
                    if run.len() > best.1 {
                        best = (run[0], run.len());
                    }
                }
                FillValue::Num(best.0)
            } else {
                let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                for v in &present {
                    *counts.entry(v.as_cat().unwrap_or_default()).or_default() += 1;
                }
                let mut best = ("", 0usize);
                for (c, n) in counts {
                    if n > best.1 {
                        best = (c, n);
                    }
                }
                FillValue::Cat(best.0.to_string())
            }
        }
        ImputeStrategy::Constant(v) => v.clone(),
    };
    Ok(Imputer {
        source_column: column.to_string(),
        strategy,
        fill_value,
        adds_indicator,
    })
}

impl Imputer {
    /// Returns the filled value and a missingness indicator.
    pub fn apply(&self, value: &Value) -> (Value, u8) {
        if value.is_missing() {
            (self.fill_value.to_value(), 1)
        } else {
            (value.clone(), 0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub negative: f64,
    pub positive: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights {
            negative: 1.0,
            positive: 1.0,
        }
    }
}

impl ClassWeights {
    pub fn weight_of(&self, label: u8) -> f64 {
        if label == 1 {
            self.positive
        } else {
            self.negative
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    Balanced,
    None,
    Explicit { negative: f64, positive: f64 },
}

pub fn compute_class_weights(labels: &[u8], scheme: WeightScheme) -> Result<ClassWeights> {
    match scheme {
        WeightScheme::None => Ok(ClassWeights::default()),
        WeightScheme::Explicit { negative, positive } => {
            if !(negative > 0.0 && positive > 0.0 && negative.is_finite() && positive.is_finite()) {
                return Err(invalid!("class weights must be strictly positive"));
            }
            Ok(ClassWeights { negative, positive })
        }
        WeightScheme::Balanced => {
            let n = labels.len() as f64;
            let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
            let n_neg = n - n_pos;
            if n_pos == 0.0 || n_neg == 0.0 {
                return Err(invalid!("balanced class weights need both classes present"));
            }
            Ok(ClassWeights {
                negative: n / (2.0 * n_neg),
                positive: n / (2.0 * n_pos),
            })
        }
    }
}

/// Keeps every positive and a seeded random subset of negatives so that
/// positives per negative is `target_ratio`. Returns sorted row indices.
pub fn downsample_majority(labels: &[u8], target_ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(target_ratio.is_finite() && target_ratio > 0.0) {
        return Err(invalid!("target_ratio must be positive, got {target_ratio}"));
    }
    let (pos, mut neg): (Vec<usize>, Vec<usize>) =
        (0..labels.len()).partition(|&i| labels[i] == 1);
    if pos.is_empty() || neg.is_empty() {
        return Err(invalid!("downsampling needs both classes present"));
    }
    let wanted = (pos.len() as f64 / target_ratio).round() as usize;
    if wanted > neg.len() {
        return Err(invalid!(
            "target ratio {target_ratio} needs {wanted} negatives but only {} exist",
            neg.len()
        ));
    }
    if wanted == 0 {
        return Err(invalid!("target ratio {target_ratio} would keep no negatives"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    neg.shuffle(&mut rng);
    let mut keep: Vec<usize> = pos.into_iter().chain(neg.into_iter().take(wanted)).collect();
    keep.sort_unstable();
    Ok(keep)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// SMOTE over positive rows using exact Euclidean k-nearest neighbors.
pub fn smote_oversample(
    positives: &[Vec<f64>],
    k: usize,
    n_synthetic: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if k < 1 {
        return Err(invalid!("SMOTE needs k >= 1"));
    }
    if positives.len() < k + 1 {
        return Err(invalid!(
            "SMOTE with k={k} needs at least {} positive rows, found {}",
            k + 1,
            positives.len()
        ));
    }
    let width = positives[0].len();
    if positives.iter().any(|r| r.len() != width || r.iter().any(|x| !x.is_finite())) {
        return Err(invalid!("SMOTE needs complete numeric rows of equal width"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut neighbors: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut out = Vec::with_capacity(n_synthetic);
    for _ in 0..n_synthetic {
        let i = rng.random_range(0..positives.len());
        let nn = neighbors.entry(i).or_insert_with(|| {
            let mut others: Vec<(f64, usize)> = (0..positives.len())
                .filter(|&j| j != i)
                .map(|j| (squared_distance(&positives[i], &positives[j]), j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        });
        let j = nn[rng.random_range(0..nn.len())];
        let lambda: f64 = rng.random();
        let (xi, xj) = (&positives[i], &positives[j]);
        out.push(xi.iter().zip(xj).map(|(a, b)| a + lambda * (b - a)).collect());
    }
    Ok(out)
}

/// Imputation choice in a feature plan; `none` leaves numeric gaps as NaN for the trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Imputation {
    None,
    Median,
    Mean,
    Mode,
    Constant(FillValue),
}

impl Imputation {
    fn strategy(&self) -> Option<ImputeStrategy> {
        match self {
            Imputation::None => None,
            Imputation::Median => Some(ImputeStrategy::Median),
            Imputation::Mean => Some(ImputeStrategy::Mean),
            Imputation::Mode => Some(ImputeStrategy::Mode),
            Imputation::Constant(v) => Some(ImputeStrategy::Constant(v.clone())),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnPlan {
    /// Encoder for categorical columns; defaults to one-hot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderMethod>,
    #[serde(default, flatten)]
    pub options: EncoderOptions,
    /// Defaults to median for numeric columns and none for categorical ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impute: Option<Imputation>,
    #[serde(default = "default_true")]
    pub indicator: bool,
}

impl Default for ColumnPlan {
    fn default() -> Self {
        ColumnPlan {
            encoder: None,
            options: EncoderOptions::default(),
            impute: None,
            indicator: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeaturePlan {
    #[serde(default)]
    pub columns: BTreeMap<String, ColumnPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub column: String,
    pub kind: ColumnKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub imputer: Option<Imputer>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<Encoder>,
}

/// Fitted column transforms producing the dense feature matrix.
///
/// Serialized as the transformer manifest for reproducing a feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTransformer {
    pub transforms: Vec<ColumnTransform>,
    pub feature_names: Vec<String>,
    #[serde(skip)]
    column_index: Vec<usize>,
}

impl FeatureTransformer {
    /// Fits transforms for `columns` on the panel rows in `train_rows`.
    pub fn fit(
        panel: &PanelDataset,
        train_rows: &[usize],
        columns: &[String],
        plan: &FeaturePlan,
    ) -> Result<Self> {
        for name in plan.columns.keys() {
            if panel.column_index(name).is_none() {
                return Err(Error::Config(format!("feature plan references unknown column {name:?}")));
            }
        }
        let labels: Vec<u8> = train_rows.iter().map(|&i| panel.rows[i].label).collect();
        let mut transforms = Vec::new();
        let mut feature_names = Vec::new();
        let mut column_index = Vec::new();
        for name in columns {
            let idx = panel
                .column_index(name)
                .ok_or_else(|| Error::Config(format!("unknown feature column {name:?}")))?;
            let kind = panel.columns[idx].kind;
            let cp = plan.columns.get(name).cloned().unwrap_or_default();
            let raw: Vec<Value> = train_rows.iter().map(|&i| panel.rows[i].values[idx].clone()).collect();

            let imputation = cp.impute.clone().unwrap_or(match kind {
                ColumnKind::Numeric => Imputation::Median,
                ColumnKind::Categorical => Imputation::None,
            });
            let imputer = imputation
                .strategy()
                .map(|s| fit_imputer(name, &raw, s, cp.indicator))
                .transpose()?;
            let filled: Vec<Value> = match &imputer {
                Some(imp) => raw.iter().map(|v| imp.apply(v).0).collect(),
                None => raw,
            };
            let encoder = match kind {
                ColumnKind::Categorical => Some(fit_encoder(
                    name,
                    &filled,
                    Some(&labels),
                    cp.encoder.unwrap_or(EncoderMethod::OneHot),
                    &cp.options,
                )?),
                ColumnKind::Numeric => {
                    if cp.encoder.is_some() {
                        return Err(Error::Config(format!("numeric column {name:?} cannot take an encoder")));
                    }
                    None
                }
            };
            match &encoder {
                Some(e) => feature_names.extend(e.output_feature_names.iter().cloned()),
                None => feature_names.push(name.clone()),
            }
            if imputer.as_ref().is_some_and(|i| i.adds_indicator) {
                feature_names.push(format!("{name}:missing"));
            }
            transforms.push(ColumnTransform {
                column: name.clone(),
                kind,
                imputer,
                encoder,
            });
            column_index.push(idx);
        }
        Ok(FeatureTransformer {
            transforms,
            feature_names,
            column_index,
        })
    }

    pub fn width(&self) -> usize {
        self.feature_names.len()
    }

    /// Encodes one row of raw values (aligned with the panel columns).
    pub fn transform_values(&self, values: &[Value], out: &mut Vec<f64>) {
        for (t, &idx) in self.transforms.iter().zip(&self.column_index) {
            let (v, missing) = match &t.imputer {
                Some(imp) => imp.apply(&values[idx]),
                None => (values[idx].clone(), 0),
            };
            match &t.encoder {
                Some(e) => e.apply_into(&v, out),
                None => out.push(v.as_num().unwrap_or(f64::NAN)),
            }
            if t.imputer.as_ref().is_some_and(|i| i.adds_indicator) {
                out.push(missing as f64);
            }
        }
    }

    pub fn transform(&self, panel: &PanelDataset, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.width());
        for &i in rows {
            self.transform_values(&panel.rows[i].values, &mut data);
        }
        Matrix::new(rows.len(), self.width(), data).expect("transform produces a full matrix")
    }

    /// Index of the output feature holding the (imputed) value of a numeric column.
    pub fn numeric_feature_index(&self, column: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == column)
    }
}
