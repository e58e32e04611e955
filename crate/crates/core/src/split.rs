//! Employee-level stratified train/valid/test assignment.

use std::collections::BTreeMap;
use std::fmt;
use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::PanelDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fold {
    Train,
    Valid,
    Test,
}

impl Fold {
    pub const ALL: [Fold; 3] = [Fold::Train, Fold::Valid, Fold::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Fold::Train => "train",
            Fold::Valid => "valid",
            Fold::Test => "test",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Fold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for Fractions {
    fn default() -> Self {
        Fractions {
            train: 0.75,
            valid: 0.15,
            test: 0.10,
        }
    }
}

impl Fractions {
    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.valid, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::Config(format!("split fractions must be positive, got {a:?}")));
        }
        if (a.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {a:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub fold_of_employee: BTreeMap<String, Fold>,
    pub fractions: Fractions,
    pub strata_keys: Vec<String>,
    pub seed: u64,
    /// Strata too small to populate every fold; they were placed in train.
    pub warnings: Vec<String>,
}

impl SplitAssignment {
    /// Panel row indices belonging to `fold`, in panel order.
    pub fn rows_in(&self, panel: &PanelDataset, fold: Fold) -> Vec<usize> {
        panel
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| self.fold_of_employee.get(&r.employee_id) == Some(&fold))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["employee_id", "fold"])?;
        for (id, fold) in &self.fold_of_employee {
            out.write_record([id.as_str(), fold.as_str()])?;
        }
        out.flush().map_err(|e| Error::io("<split writer>", e))?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Fold sizes for `n` items: floor of each quota, then the leftover units go
/// to the largest fractional remainders (ties to the earlier fold).
pub fn largest_remainder(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let quotas = fractions.map(|f| n as f64 * f);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn stream_of(key: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(key.as_bytes());
    h.finish()
}

/// Assigns every employee in the panel to one fold.
///
/// An employee's stratum is the tuple of `strata_keys` values at their latest
/// panel row plus whether any of their rows is labeled positive. Within a
/// stratum employees are sorted by id, shuffled with a ChaCha stream keyed by
/// (seed, stratum), and cut into folds by largest-remainder counts.
pub fn group_stratified_split(
    panel: &PanelDataset,
    fractions: Fractions,
    strata_keys: &[String],
    seed: u64,
) -> Result<SplitAssignment> {
    fractions.validate()?;
    for k in strata_keys {
        if !panel.strata_keys.contains(k) {
            return Err(Error::Config(format!("stratum key {k:?} was not captured by the panel")));
        }
    }

    let mut positive: BTreeMap<&str, bool> = BTreeMap::new();
    for r in &panel.rows {
        *positive.entry(r.employee_id.as_str()).or_default() |= r.label == 1;
    }
    let latest = panel.latest_row_per_employee();

    let mut strata: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for (id, &row) in &latest {
        let r = &panel.rows[row];
        let mut key: Vec<&str> = strata_keys.iter().map(|k| r.strata[k].as_str()).collect();
        key.push(if positive[id] { "pos=1" } else { "pos=0" });
        strata.entry(key.join("\u{1f}")).or_default().push(id);
    }

    let frac = fractions.as_array();
    let mut fold_of_employee = BTreeMap::new();
    let mut warnings = Vec::new();
    for (key, mut members) in strata {
        // BTreeMap iteration already sorted members by id.
        if members.len() < Fold::ALL.len() {
            warnings.push(format!(
                "stratum {:?} has {} employee(s); assigned to train",
                key.replace('\u{1f}', "|"),
                members.len()
            ));
            for id in members {
                fold_of_employee.insert(id.to_string(), Fold::Train);
            }
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_of(&key));
        members.shuffle(&mut rng);
        let counts = largest_remainder(members.len(), &frac);
        let mut it = members.into_iter();
        for fold in Fold::ALL {
            for id in it.by_ref().take(counts[fold.index()]) {
                fold_of_employee.insert(id.to_string(), fold);
            }
        }
    }

    Ok(SplitAssignment {
        fold_of_employee,
        fractions,
        strata_keys: strata_keys.to_vec(),
        seed,
        warnings,
    })
}
