use serde::{Deserialize, Serialize};

use super::binning::{bin_features, BinnedMatrix, BinningMap};
use super::{sigmoid, GbdtModel, GbdtParams, Node, Tree};
use crate::error::{invalid, Result};
use crate::evaluate::auc_pr;
use crate::features::compute_class_weights;
use crate::matrix::Matrix;

/// Early-stopping metric evaluated on validation margins; higher is better.
pub trait ValidationMetric {
    fn name(&self) -> &'static str;
    /// `None` when the metric is undefined for these labels.
    fn score(&self, margins: &[f64], labels: &[u8]) -> Option<f64>;
}

pub struct AucPrMetric;

impl ValidationMetric for AucPrMetric {
    fn name(&self) -> &'static str {
        "auc_pr"
    }

    fn score(&self, margins: &[f64], labels: &[u8]) -> Option<f64> {
        auc_pr(margins, labels).ok()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [u8],
    /// Per-sample weights; derived from `GbdtParams::class_weight` when absent.
    pub weights: Option<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub train_loss: f64,
    pub valid_metric: Option<f64>,
    /// Sum of split gains of this round's tree.
    pub gain: f64,
    pub n_leaves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub metric: String,
    pub initial_train_loss: f64,
    pub rounds: Vec<RoundLog>,
    /// Number of trees kept in the returned model.
    pub best_n_trees: usize,
    pub best_valid_metric: Option<f64>,
    pub stopped_early: bool,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Weighted mean logistic loss of margins against labels.
pub fn weighted_log_loss(margins: &[f64], labels: &[u8], weights: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&m, &y), &w) in margins.iter().zip(labels).zip(weights) {
        num += w * (softplus(m) - y as f64 * m);
        den += w;
    }
    num / den
}

/// Trains on raw features: bins them with the params' settings, then boosts.
pub fn train_gbdt(
    train: TrainData<'_>,
    valid: Option<(&Matrix, &[u8])>,
    params: &GbdtParams,
    feature_names: Vec<String>,
) -> Result<(GbdtModel, TrainingLog)> {
    params.validate()?;
    if train.features.n_rows() == 0 {
        return Err(invalid!("training set is empty"));
    }
    let binning = bin_features(train.features, params.max_bins, params.bin_sample_size, params.seed)?;
    let binned = binning.bin_matrix(train.features)?;
    let valid_binned = match valid {
        Some((m, y)) => Some((binning.bin_matrix(m)?, y)),
        None => None,
    };
    let weights = match train.weights {
        Some(w) => w.to_vec(),
        None => {
            let cw = compute_class_weights(train.labels, params.class_weight)?;
            train.labels.iter().map(|&y| cw.weight_of(y)).collect()
        }
    };
    train_binned(
        &binned,
        train.labels,
        &weights,
        binning,
        valid_binned.as_ref().map(|(m, y)| (m, *y)),
        params,
        feature_names,
        &AucPrMetric,
    )
}

#[derive(Debug, Clone, Copy, Default)]
struct BinStats {
    g: f64,
    h: f64,
    w: f64,
    n: u32,
}

impl BinStats {
    fn add(&mut self, o: &BinStats) {
        self.g += o.g;
        self.h += o.h;
        self.w += o.w;
        self.n += o.n;
    }

    fn minus(&self, o: &BinStats) -> BinStats {
        BinStats {
            g: self.g - o.g,
            h: self.h - o.h,
            w: self.w - o.w,
            n: self.n - o.n,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: u16,
    default_left: bool,
}

struct GrowingLeaf {
    node: usize,
    rows: Vec<u32>,
    hist: Vec<BinStats>,
    totals: BinStats,
    depth: usize,
    best: Option<Candidate>,
}

struct Grower<'a> {
    data: &'a BinnedMatrix,
    binning: &'a BinningMap,
    params: &'a GbdtParams,
    /// Start of each feature's bins in a flattened histogram; each feature has
    /// its regular bins followed by the missing bin.
    offsets: Vec<usize>,
    hist_len: usize,
    grad: &'a [f64],
    hess: &'a [f64],
    weights: &'a [f64],
}

impl<'a> Grower<'a> {
    fn new(
        data: &'a BinnedMatrix,
        binning: &'a BinningMap,
        params: &'a GbdtParams,
        grad: &'a [f64],
        hess: &'a [f64],
        weights: &'a [f64],
    ) -> Self {
        let mut offsets = Vec::with_capacity(binning.n_features());
        let mut acc = 0;
        for fb in &binning.features {
            offsets.push(acc);
            acc += fb.n_bins() + 1;
        }
        Grower {
            data,
            binning,
            params,
            offsets,
            hist_len: acc,
            grad,
            hess,
            weights,
        }
    }

    fn totals(&self, rows: &[u32]) -> BinStats {
        let mut t = BinStats::default();
        for &r in rows {
            let r = r as usize;
            t.g += self.grad[r];
            t.h += self.hess[r];
            t.w += self.weights[r];
            t.n += 1;
        }
        t
    }

    fn histogram(&self, rows: &[u32]) -> Vec<BinStats> {
        let mut hist = vec![BinStats::default(); self.hist_len];
        for (j, col) in self.data.columns.iter().enumerate() {
            let base = self.offsets[j];
            for &r in rows {
                let r = r as usize;
                let b = &mut hist[base + col[r] as usize];
                b.g += self.grad[r];
                b.h += self.hess[r];
                b.w += self.weights[r];
                b.n += 1;
            }
        }
        hist
    }

    fn score(&self, s: &BinStats) -> f64 {
        s.g * s.g / (s.h + self.params.lambda_l2)
    }

    fn can_split(&self, leaf_depth: usize, n_rows: usize) -> bool {
        self.params.max_depth.is_none_or(|d| leaf_depth < d)
            && n_rows >= 2 * self.params.min_data_in_leaf
    }

    fn best_split(&self, hist: &[BinStats], totals: &BinStats) -> Option<Candidate> {
        let min_n = self.params.min_data_in_leaf as u32;
        let lambda = self.params.lambda_l2;
        let parent = self.score(totals);
        let tolerance = 1e-12 * (totals.h + lambda);
        let mut best: Option<Candidate> = None;
        for (j, fb) in self.binning.features.iter().enumerate() {
            let base = self.offsets[j];
            let n_bins = fb.n_bins();
            let missing = hist[base + n_bins];
            let directions: &[bool] = if missing.n > 0 { &[true, false] } else { &[true] };
            let mut left_regular = BinStats::default();
            for t in 0..n_bins {
                left_regular.add(&hist[base + t]);
                for &default_left in directions {
                    let mut left = left_regular;
                    if default_left {
                        left.add(&missing);
                    }
                    let right = totals.minus(&left);
                    if left.n < min_n || right.n < min_n {
                        continue;
                    }
                    if left.h + lambda <= 1e-12 || right.h + lambda <= 1e-12 {
                        continue;
                    }
                    let gain = self.score(&left) + self.score(&right) - parent;
                    // Zero-gain splits (up to rounding) are allowed so symmetric patterns such as parity can be learned.
                    if gain >= self.params.min_gain - tolerance && best.is_none_or(|b| gain > b.gain) {
                        best = Some(Candidate {
                            gain,
                            feature: j,
                            threshold: t as u16,
                            default_left,
                        });
                    }
                }
            }
        }
        best
    }

    fn make_leaf(&self, node: usize, rows: Vec<u32>, hist: Vec<BinStats>, totals: BinStats, depth: usize) -> GrowingLeaf {
        let best = if self.can_split(depth, rows.len()) {
            self.best_split(&hist, &totals)
        } else {
            None
        };
        GrowingLeaf {
            node,
            rows,
            hist,
            totals,
            depth,
            best,
        }
    }

    /// Grows one tree and returns it with the (leaf value, rows) pairs of its leaves.
    fn grow(&self, n_rows: usize) -> (Tree, Vec<(f64, Vec<u32>)>, f64) {
        let rows: Vec<u32> = (0..n_rows as u32).collect();
        let totals = self.totals(&rows);
        let hist = self.histogram(&rows);
        let mut nodes = vec![Node::Leaf { value: 0.0, cover: totals.w }];
        let mut leaves = vec![self.make_leaf(0, rows, hist, totals, 0)];
        let mut total_gain = 0.0;

        while leaves.len() < self.params.num_leaves {
            let mut pick: Option<usize> = None;
            for (i, l) in leaves.iter().enumerate() {
                if let Some(c) = l.best {
                    if pick.is_none_or(|p| c.gain > leaves[p].best.unwrap().gain) {
                        pick = Some(i);
                    }
                }
            }
            let Some(i) = pick else { break };
            let leaf = leaves.remove(i);
            let c = leaf.best.unwrap();
            let col = &self.data.columns[c.feature];
            let missing_bin = self.binning.features[c.feature].missing_bin();
            let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = leaf.rows.iter().partition(|&&r| {
                let b = col[r as usize];
                if b == missing_bin {
                    c.default_left
                } else {
                    b <= c.threshold
                }
            });
            let left_totals = self.totals(&left_rows);
            let right_totals = self.totals(&right_rows);
            let (left_hist, right_hist) = if left_rows.len() <= right_rows.len() {
                let small = self.histogram(&left_rows);
                let large = leaf.hist.iter().zip(&small).map(|(p, s)| p.minus(s)).collect();
                (small, large)
            } else {
                let small = self.histogram(&right_rows);
                let large: Vec<BinStats> = leaf.hist.iter().zip(&small).map(|(p, s)| p.minus(s)).collect();
                (large, small)
            };
            let left = nodes.len();
            let right = left + 1;
            nodes.push(Node::Leaf { value: 0.0, cover: left_totals.w });
            nodes.push(Node::Leaf { value: 0.0, cover: right_totals.w });
            nodes[leaf.node] = Node::Split {
                feature: c.feature,
                bin_threshold: c.threshold,
                default_left: c.default_left,
                left,
                right,
                gain: c.gain,
                cover: leaf.totals.w,
            };
            total_gain += c.gain;
            let depth = leaf.depth + 1;
            leaves.push(self.make_leaf(left, left_rows, left_hist, left_totals, depth));
            leaves.push(self.make_leaf(right, right_rows, right_hist, right_totals, depth));
        }

        let lambda = self.params.lambda_l2;
        let mut assignments = Vec::with_capacity(leaves.len());
        for leaf in leaves {
            let denom = leaf.totals.h + lambda;
            let value = if denom > 0.0 { -leaf.totals.g / denom } else { 0.0 };
            nodes[leaf.node] = Node::Leaf {
                value,
                cover: leaf.totals.w,
            };
            assignments.push((value, leaf.rows));
        }
        (Tree { nodes }, assignments, total_gain)
    }
}

fn check_labels(labels: &[u8], n: usize, what: &str) -> Result<()> {
    if labels.len() != n {
        return Err(invalid!("{what}: {} labels for {n} rows", labels.len()));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(invalid!("{what}: labels must be 0 or 1"));
    }
    Ok(())
}

/// Boosts on pre-binned training data.
#[allow(clippy::too_many_arguments)]
pub fn train_binned(
    train: &BinnedMatrix,
    labels: &[u8],
    weights: &[f64],
    binning: BinningMap,
    valid: Option<(&BinnedMatrix, &[u8])>,
    params: &GbdtParams,
    feature_names: Vec<String>,
    metric: &dyn ValidationMetric,
) -> Result<(GbdtModel, TrainingLog)> {
    params.validate()?;
    let n = train.n_rows();
    if n == 0 {
        return Err(invalid!("training set is empty"));
    }
    check_labels(labels, n, "train")?;
    if weights.len() != n || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(invalid!("need one strictly positive weight per training row"));
    }
    if train.n_features() != binning.n_features() || feature_names.len() != binning.n_features() {
        return Err(invalid!("feature count mismatch between data, binning and names"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 || n_pos == n {
        return Err(invalid!("training labels contain a single class"));
    }
    if let Some((v, y)) = valid {
        check_labels(y, v.n_rows(), "valid")?;
        if v.n_features() != binning.n_features() {
            return Err(invalid!("validation feature count mismatch"));
        }
    }

    let sum_w: f64 = weights.iter().sum();
    let pos_w: f64 = weights.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(w, _)| w).sum();
    let rate = pos_w / sum_w;
    let base_score = (rate / (1.0 - rate)).ln().clamp(-10.0, 10.0);

    let mut margins = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut valid_margins = valid.map(|(v, _)| vec![base_score; v.n_rows()]);

    let initial_train_loss = weighted_log_loss(&margins, labels, weights);
    let mut best = match (valid, &valid_margins) {
        (Some((_, y)), Some(vm)) => metric.score(vm, y),
        _ => None,
    };
    let early_stopping = best.is_some();
    if valid.is_some_and(|(v, _)| v.n_rows() > 0) && !early_stopping {
        log::warn!("validation metric undefined on the validation labels; early stopping disabled");
    }
    let mut best_n_trees = 0usize;
    let mut trees = Vec::new();
    let mut rounds = Vec::new();
    let mut stopped_early = false;

    for round in 0..params.n_estimators {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            grad[i] = weights[i] * (p - labels[i] as f64);
            hess[i] = weights[i] * p * (1.0 - p);
        }
        let grower = Grower::new(train, &binning, params, &grad, &hess, weights);
        let (tree, assignments, gain) = grower.grow(n);
        for (value, rows) in &assignments {
            let step = params.learning_rate * value;
            for &r in rows {
                margins[r as usize] += step;
            }
        }
        let mut valid_metric = None;
        if let (Some((v, y)), Some(vm)) = (valid, valid_margins.as_mut()) {
            for (r, m) in vm.iter_mut().enumerate() {
                *m += params.learning_rate * tree.predict_binned(v, r, &binning);
            }
            if early_stopping {
                valid_metric = metric.score(vm, y);
            }
        }
        rounds.push(RoundLog {
            round: round + 1,
            train_loss: weighted_log_loss(&margins, labels, weights),
            valid_metric,
            gain,
            n_leaves: tree.n_leaves(),
        });
        trees.push(tree);

        if early_stopping {
            let score = valid_metric.unwrap_or(f64::NEG_INFINITY);
            if score > best.unwrap() {
                best = Some(score);
                best_n_trees = trees.len();
            } else if trees.len() - best_n_trees >= params.early_stopping_rounds {
                stopped_early = true;
                break;
            }
        }
    }
    if early_stopping {
        trees.truncate(best_n_trees);
    } else {
        best_n_trees = trees.len();
    }

    let model = GbdtModel {
        params: params.clone(),
        base_score,
        learning_rate: params.learning_rate,
        binning,
        trees,
        feature_names,
    };
    let log = TrainingLog {
        metric: metric.name().to_string(),
        initial_train_loss,
        rounds,
        best_n_trees,
        best_valid_metric: best,
        stopped_early,
    };
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::WeightScheme;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|j| format!("f{j}")).collect()
    }

    fn separable() -> (Matrix, Vec<u8>) {
        let xs: Vec<f64> = (0..200).map(|i| (i as f64 - 99.5) / 10.0).collect();
        let labels = xs.iter().map(|&x| (x > 0.0) as u8).collect();
        (Matrix::new(200, 1, xs).unwrap(), labels)
    }

    fn noisy(n: usize, seed: u64) -> (Matrix, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let x: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let missing = rng.random::<f64>() < 0.1;
            let logit = 3.0 * x[0] - 2.0 * x[1] - 0.5;
            labels.push((rng.random::<f64>() < sigmoid(logit)) as u8);
            data.extend([if missing { f64::NAN } else { x[0] }, x[1], x[2]]);
        }
        (Matrix::new(n, 3, data).unwrap(), labels)
    }

    #[test]
    fn separable_data_reaches_perfect_ap() {
        let (x, y) = separable();
        let data = TrainData { features: &x, labels: &y, weights: None };
        let (model, _) = train_gbdt(data, None, &GbdtParams::default(), names(1)).unwrap();
        let margins = model.predict_margins(&x).unwrap();
        assert_eq!(auc_pr(&margins, &y).unwrap(), 1.0);
    }

    #[test]
    fn zero_estimators_gives_base_score() {
        let (x, y) = separable();
        let params = GbdtParams { n_estimators: 0, ..Default::default() };
        let data = TrainData { features: &x, labels: &y, weights: None };
        let (model, log) = train_gbdt(data, None, &params, names(1)).unwrap();
        assert!(model.trees.is_empty());
        assert!(log.rounds.is_empty());
        for m in model.predict_margins(&x).unwrap() {
            assert_eq!(m, model.base_score);
        }
    }

    #[test]
    fn balanced_weights_center_base_score() {
        let (x, _) = separable();
        let y: Vec<u8> = (0..200).map(|i| (i % 10 == 0) as u8).collect();
        let params = GbdtParams {
            n_estimators: 0,
            class_weight: WeightScheme::Balanced,
            ..Default::default()
        };
        let data = TrainData { features: &x, labels: &y, weights: None };
        let (model, _) = train_gbdt(data, None, &params, names(1)).unwrap();
        assert!(model.base_score.abs() < 1e-12, "{}", model.base_score);
    }

    #[test]
    fn single_class_and_empty_rejected() {
        let (x, _) = separable();
        let y = vec![0u8; 200];
        let data = TrainData { features: &x, labels: &y, weights: None };
        assert!(train_gbdt(data, None, &GbdtParams::default(), names(1)).is_err());
        let empty = Matrix::new(0, 1, vec![]).unwrap();
        let data = TrainData { features: &empty, labels: &[], weights: None };
        assert!(train_gbdt(data, None, &GbdtParams::default(), names(1)).is_err());
    }

    #[test]
    fn training_loss_is_non_increasing() {
        let (x, y) = noisy(2000, 5);
        let params = GbdtParams { n_estimators: 100, ..Default::default() };
        let data = TrainData { features: &x, labels: &y, weights: None };
        let (_, log) = train_gbdt(data, None, &params, names(3)).unwrap();
        let mut prev = log.initial_train_loss;
        for r in &log.rounds {
            assert!(r.train_loss <= prev + 1e-9, "round {}: {} > {prev}", r.round, r.train_loss);
            prev = r.train_loss;
        }
    }

    #[test]
    fn ensemble_margin_is_additive_over_trees() {
        let (x, y) = noisy(1000, 6);
        let params = GbdtParams { n_estimators: 20, ..Default::default() };
        let data = TrainData { features: &x, labels: &y, weights: None };
        let (model, _) = train_gbdt(data, None, &params, names(3)).unwrap();
        for row in x.rows().take(50) {
            let per_tree: f64 = model.trees.iter().map(|t| t.predict_row(row, &model.binning)).sum();
            let direct = model.margin_row(row);
            assert!((direct - (model.base_score + model.learning_rate * per_tree)).abs() < 1e-12);
        }
    }

    #[test]
    fn early_stopping_truncates_to_best_round() {
        let (x, y) = noisy(1500, 7);
        let (vx, vy) = noisy(800, 8);
        let params = GbdtParams {
            n_estimators: 400,
            early_stopping_rounds: 10,
            learning_rate: 0.3,
            min_data_in_leaf: 2,
            ..Default::default()
        };
        let data = TrainData { features: &x, labels: &y, weights: None };
        let (model, log) = train_gbdt(data, Some((&vx, &vy)), &params, names(3)).unwrap();
        assert!(log.stopped_early);
        assert_eq!(model.trees.len(), log.best_n_trees);
        assert_eq!(log.rounds.len(), log.best_n_trees + 10);
        let best = log.rounds[log.best_n_trees - 1].valid_metric.unwrap();
        assert_eq!(Some(best), log.best_valid_metric);
        assert!(log.rounds.iter().all(|r| r.valid_metric.unwrap() <= best));
        let ap = auc_pr(&model.predict_margins(&vx).unwrap(), &vy).unwrap();
        assert!((ap - best).abs() < 1e-12);
    }

    #[test]
    fn node_covers_are_additive() {
        let (x, y) = noisy(500, 9);
        let params = GbdtParams { n_estimators: 5, ..Default::default() };
        let data = TrainData { features: &x, labels: &y, weights: None };
        let (model, _) = train_gbdt(data, None, &params, names(3)).unwrap();
        for t in &model.trees {
            assert!((t.nodes[0].cover() - 500.0).abs() < 1e-9);
            for n in &t.nodes {
                if let Node::Split { left, right, cover, .. } = n {
                    let sum = t.nodes[*left].cover() + t.nodes[*right].cover();
                    assert!((sum - cover).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn respects_num_leaves_and_depth() {
        let (x, y) = noisy(2000, 10);
        let params = GbdtParams {
            n_estimators: 5,
            num_leaves: 7,
            max_depth: Some(2),
            min_data_in_leaf: 1,
            ..Default::default()
        };
        let data = TrainData { features: &x, labels: &y, weights: None };
        let (model, _) = train_gbdt(data, None, &params, names(3)).unwrap();
        for t in &model.trees {
            assert!(t.n_leaves() <= 4);
        }
        let params = GbdtParams { max_depth: None, ..params };
        let data = TrainData { features: &x, labels: &y, weights: None };
        let (model, _) = train_gbdt(data, None, &params, names(3)).unwrap();
        assert!(model.trees.iter().all(|t| t.n_leaves() <= 7));
        assert!(model.trees.iter().any(|t| t.n_leaves() == 7));
    }

    #[test]
    fn missing_values_learn_a_direction() {
        // Missing rows are all positive, so a split must route them right or left consistently.
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..300 {
            let x = (i % 100) as f64;
            if i % 3 == 0 {
                data.push(f64::NAN);
                labels.push(1);
            } else {
                data.push(x);
                labels.push((x > 80.0) as u8);
            }
        }
        let x = Matrix::new(300, 1, data).unwrap();
        let params = GbdtParams { n_estimators: 50, min_data_in_leaf: 5, ..Default::default() };
        let d = TrainData { features: &x, labels: &labels, weights: None };
        let (model, _) = train_gbdt(d, None, &params, names(1)).unwrap();
        let m = model.predict_margins(&Matrix::from_rows(&[vec![f64::NAN], vec![10.0]]).unwrap()).unwrap();
        assert!(m[0] > 0.0 && m[1] < 0.0, "{m:?}");
    }
}
