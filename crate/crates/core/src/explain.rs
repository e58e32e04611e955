//! Attributions for tree ensembles: path-dependent TreeSHAP with an exact
//! subset-enumeration oracle, feature importance and partial dependence.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gbdt::{goes_left_raw, GbdtModel, Node, Tree};
use crate::matrix::Matrix;

/// Attributions in margin (log-odds) units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapExplanation {
    pub base_value: f64,
    pub phi: Vec<f64>,
    /// `base_value + sum(phi)`
    pub reconstructed_margin: f64,
}

impl ShapExplanation {
    fn new(base_value: f64, phi: Vec<f64>) -> Self {
        let reconstructed_margin = base_value + phi.iter().sum::<f64>();
        ShapExplanation {
            base_value,
            phi,
            reconstructed_margin,
        }
    }
}

fn check_covers(model: &GbdtModel) -> Result<()> {
    for (t, tree) in model.trees.iter().enumerate() {
        if tree.nodes.iter().any(|n| !(n.cover() > 0.0)) {
            return Err(invalid!("tree {t} lacks positive node covers; cannot explain"));
        }
    }
    Ok(())
}

fn check_row(model: &GbdtModel, row: &[f64]) -> Result<()> {
    if row.len() != model.n_features() {
        return Err(invalid!("row has {} features, model expects {}", row.len(), model.n_features()));
    }
    Ok(())
}

/// Cover-weighted mean leaf value of a tree.
fn tree_expected_value(tree: &Tree) -> f64 {
    let root = tree.nodes[0].cover();
    tree.nodes
        .iter()
        .filter_map(|n| match n {
            Node::Leaf { value, cover } => Some(value * cover / root),
            Node::Split { .. } => None,
        })
        .sum()
}

/// Margin of the model when no feature is known.
pub fn expected_margin(model: &GbdtModel) -> f64 {
    model.base_score + model.learning_rate * model.trees.iter().map(tree_expected_value).sum::<f64>()
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: Option<usize>,
    zero_fraction: f64,
    one_fraction: f64,
    pweight: f64,
}

fn extend_path(path: &mut Vec<PathElement>, zero_fraction: f64, one_fraction: f64, feature: Option<usize>) {
    let d = path.len();
    path.push(PathElement {
        feature,
        zero_fraction,
        one_fraction,
        pweight: if d == 0 { 1.0 } else { 0.0 },
    });
    for i in (0..d).rev() {
        path[i + 1].pweight += one_fraction * path[i].pweight * (i + 1) as f64 / (d + 1) as f64;
        path[i].pweight = zero_fraction * path[i].pweight * (d - i) as f64 / (d + 1) as f64;
    }
}

fn unwind_path(path: &mut Vec<PathElement>, idx: usize) {
    let d = path.len() - 1;
    let one = path[idx].one_fraction;
    let zero = path[idx].zero_fraction;
    let mut next = path[d].pweight;
    for i in (0..d).rev() {
        if one != 0.0 {
            let tmp = path[i].pweight;
            path[i].pweight = next * (d + 1) as f64 / ((i + 1) as f64 * one);
            next = tmp - path[i].pweight * zero * (d - i) as f64 / (d + 1) as f64;
        } else {
            path[i].pweight = path[i].pweight * (d + 1) as f64 / (zero * (d - i) as f64);
        }
    }
    for i in idx..d {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
    path.pop();
}

fn unwound_path_sum(path: &[PathElement], idx: usize) -> f64 {
    let d = path.len() - 1;
    let one = path[idx].one_fraction;
    let zero = path[idx].zero_fraction;
    let mut next = path[d].pweight;
    let mut total = 0.0;
    for i in (0..d).rev() {
        if one != 0.0 {
            let tmp = next * (d + 1) as f64 / ((i + 1) as f64 * one);
            total += tmp;
            next = path[i].pweight - tmp * zero * (d - i) as f64 / (d + 1) as f64;
        } else if zero != 0.0 {
            total += path[i].pweight / zero / ((d - i) as f64 / (d + 1) as f64);
        }
    }
    total
}

struct ShapWalk<'a> {
    tree: &'a Tree,
    model: &'a GbdtModel,
    row: &'a [f64],
    phi: &'a mut [f64],
}

impl ShapWalk<'_> {
    fn recurse(
        &mut self,
        node: usize,
        parent_path: &[PathElement],
        zero_fraction: f64,
        one_fraction: f64,
        feature: Option<usize>,
    ) {
        let mut path = parent_path.to_vec();
        extend_path(&mut path, zero_fraction, one_fraction, feature);
        match &self.tree.nodes[node] {
            Node::Leaf { value, .. } => {
                for i in 1..path.len() {
                    let w = unwound_path_sum(&path, i);
                    let el = path[i];
                    let f = el.feature.expect("non-root path elements carry a feature");
                    self.phi[f] += w * (el.one_fraction - el.zero_fraction) * value;
                }
            }
            Node::Split {
                feature: split_feature,
                bin_threshold,
                default_left,
                left,
                right,
                cover,
                ..
            } => {
                let f = *split_feature;
                let bins = &self.model.binning.features[f];
                let (hot, cold) = if goes_left_raw(self.row[f], bins, *bin_threshold, *default_left) {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                let hot_zero = self.tree.nodes[hot].cover() / cover;
                let cold_zero = self.tree.nodes[cold].cover() / cover;
                let (mut incoming_zero, mut incoming_one) = (1.0, 1.0);
                if let Some(k) = (1..path.len()).find(|&k| path[k].feature == Some(f)) {
                    incoming_zero = path[k].zero_fraction;
                    incoming_one = path[k].one_fraction;
                    unwind_path(&mut path, k);
                }
                self.recurse(hot, &path, hot_zero * incoming_zero, incoming_one, Some(f));
                self.recurse(cold, &path, cold_zero * incoming_zero, 0.0, Some(f));
            }
        }
    }
}

/// Path-dependent TreeSHAP values of one raw feature row.
pub fn tree_shap(model: &GbdtModel, row: &[f64]) -> Result<ShapExplanation> {
    check_row(model, row)?;
    check_covers(model)?;
    let mut phi = vec![0.0; model.n_features()];
    for tree in &model.trees {
        let mut walk = ShapWalk {
            tree,
            model,
            row,
            phi: &mut phi,
        };
        walk.recurse(0, &[], 1.0, 1.0, None);
    }
    for p in &mut phi {
        *p *= model.learning_rate;
    }
    Ok(ShapExplanation::new(expected_margin(model), phi))
}

/// Expected tree output when only the features in `known` are observed,
/// averaging over unknown splits by cover.
fn conditional_expectation(model: &GbdtModel, tree: &Tree, row: &[f64], known: &dyn Fn(usize) -> bool, node: usize) -> f64 {
    match &tree.nodes[node] {
        Node::Leaf { value, .. } => *value,
        Node::Split {
            feature,
            bin_threshold,
            default_left,
            left,
            right,
            cover,
            ..
        } => {
            if known(*feature) {
                let bins = &model.binning.features[*feature];
                let next = if goes_left_raw(row[*feature], bins, *bin_threshold, *default_left) {
                    *left
                } else {
                    *right
                };
                conditional_expectation(model, tree, row, known, next)
            } else {
                let l = conditional_expectation(model, tree, row, known, *left);
                let r = conditional_expectation(model, tree, row, known, *right);
                (tree.nodes[*left].cover() * l + tree.nodes[*right].cover() * r) / cover
            }
        }
    }
}

pub const ORACLE_MAX_FEATURES: usize = 12;

/// Exact Shapley values by enumerating every subset of the features the model splits on.
pub fn shapley_oracle(model: &GbdtModel, row: &[f64]) -> Result<ShapExplanation> {
    check_row(model, row)?;
    check_covers(model)?;
    let used: Vec<usize> = model
        .trees
        .iter()
        .flat_map(|t| t.nodes.iter())
        .filter_map(|n| match n {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf { .. } => None,
        })
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let m = used.len();
    if m > ORACLE_MAX_FEATURES {
        return Err(invalid!("oracle supports at most {ORACLE_MAX_FEATURES} used features, model uses {m}"));
    }
    let n_subsets = 1usize << m;
    let value: Vec<f64> = (0..n_subsets)
        .map(|mask| {
            let known = |f: usize| used.iter().position(|&u| u == f).is_some_and(|k| mask & (1 << k) != 0);
            let sum: f64 = model
                .trees
                .iter()
                .map(|t| conditional_expectation(model, t, row, &known, 0))
                .sum();
            model.base_score + model.learning_rate * sum
        })
        .collect();

    // Shapley weight |S|! (m - |S| - 1)! / m!
    let mut fact = vec![1.0f64; m + 1];
    for i in 1..=m {
        fact[i] = fact[i - 1] * i as f64;
    }
    let mut phi = vec![0.0; model.n_features()];
    for (k, &f) in used.iter().enumerate() {
        let bit = 1 << k;
        let mut total = 0.0;
        for mask in (0..n_subsets).filter(|s| s & bit == 0) {
            let s = mask.count_ones() as usize;
            let w = fact[s] * fact[m - s - 1] / fact[m];
            total += w * (value[mask | bit] - value[mask]);
        }
        phi[f] = total;
    }
    Ok(ShapExplanation::new(value[0], phi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceKind {
    Gain,
    SplitCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub feature: String,
    pub gain: f64,
    pub split_count: usize,
    /// Share of the total for the table's kind; `None` when the total is zero.
    pub share: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub kind: ImportanceKind,
    pub rows: Vec<ImportanceRow>,
}

impl ImportanceTable {
    /// Rows sorted by share, largest first (ties by feature order).
    pub fn ranked(&self) -> Vec<&ImportanceRow> {
        let mut rows: Vec<&ImportanceRow> = self.rows.iter().collect();
        let key = |r: &ImportanceRow| match self.kind {
            ImportanceKind::Gain => r.gain,
            ImportanceKind::SplitCount => r.split_count as f64,
        };
        rows.sort_by(|a, b| key(b).total_cmp(&key(a)));
        rows
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["feature", "gain", "split_count", "share"])?;
        for r in &self.rows {
            out.write_record([
                r.feature.clone(),
                r.gain.to_string(),
                r.split_count.to_string(),
                r.share.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<importance writer>", e))?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

pub fn feature_importance(model: &GbdtModel, kind: ImportanceKind) -> ImportanceTable {
    let mut gain = vec![0.0; model.n_features()];
    let mut count = vec![0usize; model.n_features()];
    for tree in &model.trees {
        for node in &tree.nodes {
            if let Node::Split { feature, gain: g, .. } = node {
                gain[*feature] += g;
                count[*feature] += 1;
            }
        }
    }
    let total = match kind {
        ImportanceKind::Gain => gain.iter().sum::<f64>(),
        ImportanceKind::SplitCount => count.iter().sum::<usize>() as f64,
    };
    let rows = model
        .feature_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let amount = match kind {
                ImportanceKind::Gain => gain[j],
                ImportanceKind::SplitCount => count[j] as f64,
            };
            ImportanceRow {
                feature: name.clone(),
                gain: gain[j],
                split_count: count[j],
                share: (total > 0.0).then(|| amount / total),
            }
        })
        .collect();
    ImportanceTable { kind, rows }
}

/// Mean margin over `reference` rows with `feature` overwritten by each grid value.
pub fn partial_dependence(model: &GbdtModel, feature: usize, grid: &[f64], reference: &Matrix) -> Result<Vec<(f64, f64)>> {
    if feature >= model.n_features() {
        return Err(invalid!("feature index {feature} out of range"));
    }
    if grid.is_empty() || reference.n_rows() == 0 {
        return Err(invalid!("partial dependence needs a non-empty grid and reference set"));
    }
    if reference.n_cols() != model.n_features() {
        return Err(invalid!("reference rows have {} features, model expects {}", reference.n_cols(), model.n_features()));
    }
    let mut buf = vec![0.0; model.n_features()];
    Ok(grid
        .iter()
        .map(|&g| {
            let mut sum = 0.0;
            for row in reference.rows() {
                buf.copy_from_slice(row);
                buf[feature] = g;
                sum += model.margin_row(&buf);
            }
            (g, sum / reference.n_rows() as f64)
        })
        .collect())
}
