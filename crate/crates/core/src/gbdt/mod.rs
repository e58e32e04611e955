//! Histogram gradient-boosted decision trees for binary classification.
//!
//! Trees are grown leaf-wise on binned features with a second-order logistic
//! objective. Each split node learns a default direction for missing values.

mod binning;
mod train;
mod tune;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::WeightScheme;
use crate::matrix::Matrix;

pub use binning::{bin_features, BinnedMatrix, BinningMap, FeatureBins};
pub use train::{
    train_binned, train_gbdt, weighted_log_loss, AucPrMetric, RoundLog, TrainData, TrainingLog,
    ValidationMetric,
};
pub use tune::{grid_search, GridResult, ParamGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtParams {
    pub num_leaves: usize,
    /// `None` means unlimited depth.
    pub max_depth: Option<usize>,
    pub learning_rate: f64,
    pub n_estimators: usize,
    pub max_bins: usize,
    /// Values sampled per feature when building bin boundaries.
    pub bin_sample_size: usize,
    pub min_data_in_leaf: usize,
    pub lambda_l2: f64,
    pub min_gain: f64,
    pub early_stopping_rounds: usize,
    /// Used to derive sample weights when none are supplied.
    pub class_weight: WeightScheme,
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams {
            num_leaves: 31,
            max_depth: None,
            learning_rate: 0.1,
            n_estimators: 500,
            max_bins: 255,
            bin_sample_size: 200_000,
            min_data_in_leaf: 20,
            lambda_l2: 1.0,
            min_gain: 0.0,
            early_stopping_rounds: 50,
            class_weight: WeightScheme::None,
            seed: 0,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_leaves < 2 {
            return Err(Error::Config("num_leaves must be at least 2".into()));
        }
        if !(2..=65535).contains(&self.max_bins) {
            return Err(Error::Config("max_bins must be in [2, 65535]".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config("learning_rate must be in (0, 1]".into()));
        }
        if self.max_depth == Some(0) {
            return Err(Error::Config("max_depth must be at least 1 when set".into()));
        }
        if !(self.lambda_l2 >= 0.0 && self.min_gain >= 0.0) {
            return Err(Error::Config("lambda_l2 and min_gain must be non-negative".into()));
        }
        if self.min_data_in_leaf < 1 || self.bin_sample_size < 1 {
            return Err(Error::Config("min_data_in_leaf and bin_sample_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        /// Rows with bin index at or below this go left.
        bin_threshold: u16,
        default_left: bool,
        left: usize,
        right: usize,
        gain: f64,
        /// Sum of training sample weights reaching this node.
        cover: f64,
    },
    Leaf {
        value: f64,
        cover: f64,
    },
}

impl Node {
    pub fn cover(&self) -> f64 {
        match self {
            Node::Split { cover, .. } | Node::Leaf { cover, .. } => *cover,
        }
    }
}

/// Binary tree stored as a node arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Leaf node reached by a raw feature row.
    pub fn leaf_index(&self, row: &[f64], binning: &BinningMap) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split {
                    feature,
                    bin_threshold,
                    default_left,
                    left,
                    right,
                    ..
                } => {
                    let goes_left =
                        goes_left_raw(row[*feature], &binning.features[*feature], *bin_threshold, *default_left);
                    i = if goes_left { *left } else { *right };
                }
            }
        }
    }

    pub fn predict_row(&self, row: &[f64], binning: &BinningMap) -> f64 {
        match self.nodes[self.leaf_index(row, binning)] {
            Node::Leaf { value, .. } => value,
            Node::Split { .. } => unreachable!(),
        }
    }

    pub(crate) fn predict_binned(&self, data: &BinnedMatrix, row: usize, binning: &BinningMap) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value, .. } => return *value,
                Node::Split {
                    feature,
                    bin_threshold,
                    default_left,
                    left,
                    right,
                    ..
                } => {
                    let bin = data.get(row, *feature);
                    let goes_left = if bin == binning.features[*feature].missing_bin() {
                        *default_left
                    } else {
                        bin <= *bin_threshold
                    };
                    i = if goes_left { *left } else { *right };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

/// Routing of a raw value at a split, equivalent to comparing its bin index.
pub(crate) fn goes_left_raw(value: f64, bins: &FeatureBins, bin_threshold: u16, default_left: bool) -> bool {
    if value.is_nan() {
        default_left
    } else {
        match bins.boundaries.get(bin_threshold as usize) {
            Some(upper) => value <= *upper,
            None => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub params: GbdtParams,
    /// Initial log-odds.
    pub base_score: f64,
    pub learning_rate: f64,
    pub binning: BinningMap,
    pub trees: Vec<Tree>,
    pub feature_names: Vec<String>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl GbdtModel {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// `base_score + learning_rate * sum of leaf values`.
    pub fn margin_row(&self, row: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict_row(row, &self.binning)).sum();
        self.base_score + self.learning_rate * sum
    }

    /// Margins and probabilities for every row.
    pub fn predict(&self, rows: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        if rows.n_cols() != self.n_features() {
            return Err(invalid!(
                "rows have {} features, model expects {}",
                rows.n_cols(),
                self.n_features()
            ));
        }
        let margins: Vec<f64> = rows.rows().map(|r| self.margin_row(r)).collect();
        let probs = margins.iter().map(|&m| sigmoid(m)).collect();
        Ok((margins, probs))
    }

    pub fn predict_margins(&self, rows: &Matrix) -> Result<Vec<f64>> {
        Ok(self.predict(rows)?.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn stump() -> GbdtModel {
        GbdtModel {
            params: GbdtParams::default(),
            base_score: 0.0,
            learning_rate: 1.0,
            binning: BinningMap {
                features: vec![FeatureBins { boundaries: vec![0.0] }, FeatureBins { boundaries: vec![] }],
            },
            trees: vec![Tree {
                nodes: vec![
                    Node::Split {
                        feature: 0,
                        bin_threshold: 0,
                        default_left: true,
                        left: 1,
                        right: 2,
                        gain: 1.0,
                        cover: 100.0,
                    },
                    Node::Leaf { value: -1.0, cover: 50.0 },
                    Node::Leaf { value: 1.0, cover: 50.0 },
                ],
            }],
            feature_names: vec!["f0".into(), "f1".into()],
        }
    }

    #[test]
    fn zero_tree_model_predicts_half() {
        let mut m = stump();
        m.trees.clear();
        let rows = Matrix::from_rows(&[vec![3.0, 1.0], vec![f64::NAN, 0.0]]).unwrap();
        let (margins, probs) = m.predict(&rows).unwrap();
        assert_eq!(margins, vec![0.0, 0.0]);
        assert_eq!(probs, vec![0.5, 0.5]);
    }

    #[test]
    fn stump_right_leaf() {
        let m = stump();
        let rows = Matrix::from_rows(&[vec![0.5, 0.0]]).unwrap();
        let (margins, probs) = m.predict(&rows).unwrap();
        assert_eq!(margins[0], 1.0);
        assert!((probs[0] - 0.7311).abs() < 5e-5);
    }

    #[test]
    fn stump_missing_goes_default_direction() {
        let m = stump();
        let rows = Matrix::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert_eq!(m.predict_margins(&rows).unwrap()[0], -1.0);
    }

    #[test]
    fn width_mismatch_rejected() {
        let rows = Matrix::from_rows(&[vec![0.5]]).unwrap();
        assert!(stump().predict(&rows).is_err());
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let m = stump();
        let back = GbdtModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(1.0) - 0.7310585786300049).abs() < 1e-16);
    }
}
