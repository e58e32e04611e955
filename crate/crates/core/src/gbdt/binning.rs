use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::matrix::Matrix;

/// Upper bin boundaries for one feature.
///
/// Bin `i` holds values in `(boundaries[i-1], boundaries[i]]`; the last
/// regular bin holds everything above the final boundary. Missing values get
/// their own bin after the regular ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBins {
    pub boundaries: Vec<f64>,
}

impl FeatureBins {
    pub fn n_bins(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn missing_bin(&self) -> u16 {
        self.n_bins() as u16
    }

    pub fn bin_of(&self, value: f64) -> u16 {
        if value.is_nan() {
            self.missing_bin()
        } else {
            self.boundaries.partition_point(|b| *b < value) as u16
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningMap {
    pub features: Vec<FeatureBins>,
}

impl BinningMap {
    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn bin_matrix(&self, data: &Matrix) -> Result<BinnedMatrix> {
        if data.n_cols() != self.n_features() {
            return Err(invalid!(
                "matrix has {} columns, binning expects {}",
                data.n_cols(),
                self.n_features()
            ));
        }
        let columns = self
            .features
            .iter()
            .enumerate()
            .map(|(j, fb)| data.column(j).map(|v| fb.bin_of(v)).collect())
            .collect();
        Ok(BinnedMatrix {
            n_rows: data.n_rows(),
            columns,
        })
    }
}

/// Column-major bin indices.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedMatrix {
    pub(crate) n_rows: usize,
    pub(crate) columns: Vec<Vec<u16>>,
}

impl BinnedMatrix {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, row: usize, feature: usize) -> u16 {
        self.columns[feature][row]
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(xs: &[f64], q: f64) -> f64 {
    let pos = q * (xs.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    xs[lo] + frac * (xs[hi] - xs[lo])
}

/// Builds per-feature bin boundaries from (a seeded sample of) the training values.
///
/// Features with at most `max_bins` distinct values get one boundary midway
/// between each adjacent pair; otherwise boundaries sit at the
/// `k / max_bins` empirical quantiles, with duplicates collapsed.
pub fn bin_features(
    data: &Matrix,
    max_bins: usize,
    bin_sample_size: usize,
    seed: u64,
) -> Result<BinningMap> {
    if !(2..=65535).contains(&max_bins) {
        return Err(invalid!("max_bins must be in [2, 65535], got {max_bins}"));
    }
    if bin_sample_size < 1 {
        return Err(invalid!("bin_sample_size must be at least 1"));
    }
    let mut features = Vec::with_capacity(data.n_cols());
    for j in 0..data.n_cols() {
        let mut values: Vec<f64> = data.column(j).filter(|v| !v.is_nan()).collect();
        if values.is_empty() {
            return Err(invalid!("feature {j} has no non-missing training values"));
        }
        if values.len() > bin_sample_size {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let mut idx = rand::seq::index::sample(&mut rng, values.len(), bin_sample_size).into_vec();
            idx.sort_unstable();
            values = idx.into_iter().map(|i| values[i]).collect();
        }
        values.sort_by(f64::total_cmp);
        let mut distinct = values.clone();
        distinct.dedup();

        let mut boundaries: Vec<f64> = if distinct.len() <= max_bins {
            distinct
                .windows(2)
                .map(|w| {
                    let mid = w[0] + 0.5 * (w[1] - w[0]);
                    if mid < w[1] {
                        mid
                    } else {
                        w[0]
                    }
                })
                .collect()
        } else {
            (1..max_bins)
                .map(|k| quantile_sorted(&values, k as f64 / max_bins as f64))
                .collect()
        };
        let max = *values.last().unwrap();
        boundaries.retain(|b| *b < max);
        boundaries.dedup();
        features.push(FeatureBins { boundaries });
    }
    Ok(BinningMap { features })
}
