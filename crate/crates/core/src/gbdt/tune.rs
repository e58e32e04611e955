use serde::{Deserialize, Serialize};

use super::binning::bin_features;
use super::train::{train_binned, AucPrMetric, TrainData};
use super::GbdtParams;
use crate::error::{invalid, Error, Result};
use crate::features::compute_class_weights;
use crate::matrix::Matrix;

/// Candidate values per hyperparameter; an empty list keeps the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamGrid {
    pub learning_rate: Vec<f64>,
    pub num_leaves: Vec<usize>,
    pub max_depth: Vec<Option<usize>>,
    pub min_data_in_leaf: Vec<usize>,
    pub lambda_l2: Vec<f64>,
}

impl ParamGrid {
    /// Cartesian product over the grid, in a fixed nesting order.
    pub fn expand(&self, base: &GbdtParams) -> Vec<GbdtParams> {
        fn or_base<T: Clone>(xs: &[T], base: T) -> Vec<T> {
            if xs.is_empty() {
                vec![base]
            } else {
                xs.to_vec()
            }
        }
        let mut out = Vec::new();
        for lr in or_base(&self.learning_rate, base.learning_rate) {
            for leaves in or_base(&self.num_leaves, base.num_leaves) {
                for depth in or_base(&self.max_depth, base.max_depth) {
                    for min_data in or_base(&self.min_data_in_leaf, base.min_data_in_leaf) {
                        for lambda in or_base(&self.lambda_l2, base.lambda_l2) {
                            out.push(GbdtParams {
                                learning_rate: lr,
                                num_leaves: leaves,
                                max_depth: depth,
                                min_data_in_leaf: min_data,
                                lambda_l2: lambda,
                                ..base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: GbdtParams,
    pub best_valid_auc_pr: f64,
    /// Every candidate with its best validation AUC-PR.
    pub candidates: Vec<(GbdtParams, f64)>,
}

/// Picks the candidate with the highest early-stopped validation AUC-PR;
/// ties keep the earlier candidate.
pub fn grid_search(
    train: TrainData<'_>,
    valid: (&Matrix, &[u8]),
    base: &GbdtParams,
    grid: &ParamGrid,
    feature_names: &[String],
) -> Result<GridResult> {
    base.validate()?;
    if !valid.1.contains(&1) {
        return Err(invalid!("grid search needs positives in the validation labels"));
    }
    let binning = bin_features(train.features, base.max_bins, base.bin_sample_size, base.seed)?;
    let binned = binning.bin_matrix(train.features)?;
    let valid_binned = binning.bin_matrix(valid.0)?;
    let weights = match train.weights {
        Some(w) => w.to_vec(),
        None => {
            let cw = compute_class_weights(train.labels, base.class_weight)?;
            train.labels.iter().map(|&y| cw.weight_of(y)).collect()
        }
    };
    let mut candidates = Vec::new();
    let mut best: Option<(GbdtParams, f64)> = None;
    for params in grid.expand(base) {
        let (_, log) = train_binned(
            &binned,
            train.labels,
            &weights,
            binning.clone(),
            Some((&valid_binned, valid.1)),
            &params,
            feature_names.to_vec(),
            &AucPrMetric,
        )?;
        let score = log
            .best_valid_metric
            .ok_or_else(|| Error::Validation("validation AUC-PR undefined during grid search".into()))?;
        log::info!("grid candidate {params:?}: valid AUC-PR {score:.5}");
        if best.as_ref().is_none_or(|(_, b)| score > *b) {
            best = Some((params.clone(), score));
        }
        candidates.push((params, score));
    }
    let (best, best_valid_auc_pr) = best.expect("grid expands to at least one candidate");
    Ok(GridResult {
        best,
        best_valid_auc_pr,
        candidates,
    })
}
