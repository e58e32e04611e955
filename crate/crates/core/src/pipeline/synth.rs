//! Synthetic organization generator with planted attrition drivers.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use chrono::Datelike;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calendar::YearMonth;
use crate::error::{Error, Result};
use crate::gbdt::sigmoid;
use super::config::{
    CalibrationConfig, EvaluationConfig, ExplainConfig, ImbalanceConfig, InputsConfig, PipelineConfig, ReportConfig,
    SplitConfig,
};
use crate::features::FeaturePlan;
use crate::gbdt::GbdtParams;
use crate::ingest::{Column, ColumnKind, Event, EventTable, EventType, Schema, SnapshotRow, SnapshotTable, Value};
use crate::panel::{OutcomeType, PanelSpec};
use crate::split::Fractions;

/// Drivers a coefficient may be planted on.
pub const DRIVERS: [&str; 6] = [
    "tenure",
    "job_level",
    "comp_ratio",
    "sentiment_favorable_ratio",
    "sentiment_unfavorable_ratio",
    "manager_team_churn",
];

const JOB_FAMILIES: [&str; 6] = ["Engineering", "Sales", "Operations", "Finance", "Marketing", "Support"];
const LOCATIONS: [&str; 5] = ["Austin", "Bangalore", "London", "New York", "Remote"];
const AR: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_employees: usize,
    pub n_months: usize,
    pub start_month: YearMonth,
    /// Monthly termination probability at average driver values.
    pub base_rate: f64,
    /// Log-odds effect of a one standard deviation change in each driver.
    pub coefficients: BTreeMap<String, f64>,
    /// Log-odds amplitude of the annual cycle, peaking in January.
    pub seasonality_amplitude: f64,
    pub regretted_fraction: f64,
    pub transfer_rate: f64,
    pub team_size: usize,
    /// Share of months in which an employee's sentiment survey is absent.
    pub sentiment_missing_rate: f64,
    pub seed: u64,
}

pub fn planted_coefficients() -> BTreeMap<String, f64> {
    [
        ("sentiment_favorable_ratio", -0.6),
        ("sentiment_unfavorable_ratio", 0.5),
        ("comp_ratio", -0.5),
        ("manager_team_churn", 0.5),
        ("tenure", -0.2),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_employees: 1000,
            n_months: 24,
            start_month: YearMonth::new(2022, 1).expect("valid month"),
            base_rate: 0.02,
            coefficients: planted_coefficients(),
            seasonality_amplitude: 0.2,
            regretted_fraction: 0.6,
            transfer_rate: 0.005,
            team_size: 8,
            sentiment_missing_rate: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64, open: bool| {
            let ok = if open { p > 0.0 && p < 1.0 } else { (0.0..=1.0).contains(&p) };
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be a probability, got {p}")))
            }
        };
        prob("base_rate", self.base_rate, true)?;
        prob("regretted_fraction", self.regretted_fraction, false)?;
        prob("transfer_rate", self.transfer_rate, false)?;
        prob("sentiment_missing_rate", self.sentiment_missing_rate, false)?;
        if self.n_employees < 1 || self.n_months < 1 || self.team_size < 1 {
            return Err(Error::Config("n_employees, n_months and team_size must be at least 1".into()));
        }
        for (k, v) in &self.coefficients {
            if !DRIVERS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown driver {k:?}; expected one of {DRIVERS:?}")));
            }
            if !v.is_finite() {
                return Err(Error::Config(format!("coefficient for {k:?} must be finite")));
            }
        }
        if !self.seasonality_amplitude.is_finite() {
            return Err(Error::Config("seasonality_amplitude must be finite".into()));
        }
        Ok(())
    }

    pub fn last_month(&self) -> YearMonth {
        self.start_month.add_months(self.n_months as i64 - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthManifest {
    pub config: SynthConfig,
    /// First-month statistics used to standardize each driver before applying its coefficient.
    pub standardization: BTreeMap<String, Standardization>,
    pub n_snapshot_rows: usize,
    pub n_terminations: usize,
    pub n_transfers: usize,
    /// Terminations per employee-month.
    pub realized_monthly_rate: f64,
}

/// Column layout of generated snapshot tables.
pub fn synthetic_columns() -> Vec<Column> {
    use ColumnKind::*;
    [
        ("tenure", Numeric),
        ("job_level", Numeric),
        ("job_family", Categorical),
        ("location", Categorical),
        ("comp_ratio", Numeric),
        ("sentiment_favorable_ratio", Numeric),
        ("sentiment_unfavorable_ratio", Numeric),
        ("manager_team_churn", Numeric),
        ("quarter", Categorical),
    ]
    .into_iter()
    .map(|(name, kind)| Column {
        name: name.to_string(),
        kind,
    })
    .collect()
}

pub fn synthetic_schema() -> Schema {
    synthetic_columns().into_iter().map(|c| (c.name, c.kind)).collect()
}

struct Person {
    id: String,
    team: usize,
    tenure: f64,
    job_level: f64,
    z_fav: f64,
    z_unf: f64,
    z_comp: f64,
}

/// Raw driver values, in [`DRIVERS`] order.
struct Drivers([f64; 6]);

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn ar_step(z: f64, rng: &mut ChaCha8Rng) -> f64 {
    AR * z + (1.0 - AR * AR).sqrt() * gauss(rng)
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn draw_level(rng: &mut ChaCha8Rng) -> f64 {
    const CUM: [f64; 6] = [0.25, 0.50, 0.70, 0.85, 0.95, 1.0];
    let u: f64 = rng.random();
    (CUM.iter().position(|c| u < *c).unwrap_or(5) + 1) as f64
}

impl Person {
    fn new(id: String, team: usize, tenure: f64, rng: &mut ChaCha8Rng) -> Self {
        Person {
            id,
            team,
            tenure,
            job_level: draw_level(rng),
            z_fav: gauss(rng),
            z_unf: gauss(rng),
            z_comp: gauss(rng),
        }
    }

    fn drivers(&self, team_churn: f64) -> Drivers {
        let unf_latent = -0.6 * self.z_fav + 0.8 * self.z_unf;
        Drivers([
            self.tenure,
            self.job_level,
            1.0 + 0.1 * self.z_comp,
            sigmoid(0.6 + 0.9 * self.z_fav),
            sigmoid(-1.6 + 0.9 * unf_latent),
            sigmoid(-1.8 + 0.8 * team_churn),
        ])
    }
}

/// Generates monthly snapshots and events for a fixed-headcount organization.
///
/// Every leaver is replaced by a new hire in the same team the following month.
pub fn generate_synthetic_org(config: &SynthConfig) -> Result<(SnapshotTable, EventTable, TruthManifest)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_teams = config.n_employees.div_ceil(config.team_size);
    let team_family: Vec<&str> = (0..n_teams).map(|_| JOB_FAMILIES[rng.random_range(0..JOB_FAMILIES.len())]).collect();
    let team_location: Vec<&str> = (0..n_teams).map(|_| LOCATIONS[rng.random_range(0..LOCATIONS.len())]).collect();
    let mut team_churn: Vec<f64> = (0..n_teams).map(|_| gauss(&mut rng)).collect();

    let mut next_id = 0usize;
    let mut new_id = || {
        next_id += 1;
        format!("E{:06}", next_id - 1)
    };
    let mut people: Vec<Person> = (0..config.n_employees)
        .map(|slot| {
            let tenure = rng.random_range(0..120) as f64;
            Person::new(new_id(), slot / config.team_size, tenure, &mut rng)
        })
        .collect();

    let mut standardization = BTreeMap::new();
    for (k, name) in DRIVERS.iter().enumerate() {
        let xs: Vec<f64> = people.iter().map(|p| p.drivers(team_churn[p.team]).0[k]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        standardization.insert(name.to_string(), Standardization { mean, std });
    }
    let coef: Vec<f64> = DRIVERS
        .iter()
        .map(|d| config.coefficients.get(*d).copied().unwrap_or(0.0))
        .collect();
    let base_logit = (config.base_rate / (1.0 - config.base_rate)).ln();

    let mut rows = Vec::new();
    let mut events = Vec::new();
    let (mut n_terminations, mut n_transfers) = (0, 0);
    for m in 0..config.n_months {
        let month = config.start_month.add_months(m as i64);
        let next = month.add_months(1);
        let season = config.seasonality_amplitude * (2.0 * PI * (next.month() as f64 - 1.0) / 12.0).cos();
        let quarter = format!("Q{}", month.quarter());
        for slot in 0..people.len() {
            let p = &people[slot];
            let d = p.drivers(team_churn[p.team]);
            let missing = rng.random::<f64>() < config.sentiment_missing_rate;
            let sentiment = |x: f64| if missing { Value::Missing } else { Value::Num(round4(x)) };
            rows.push(SnapshotRow {
                employee_id: p.id.clone(),
                snapshot_date: month.last_day(),
                values: vec![
                    Value::Num(d.0[0]),
                    Value::Num(d.0[1]),
                    Value::Cat(team_family[p.team].to_string()),
                    Value::Cat(team_location[p.team].to_string()),
                    Value::Num(round4(d.0[2])),
                    sentiment(d.0[3]),
                    sentiment(d.0[4]),
                    Value::Num(round4(d.0[5])),
                    Value::Cat(quarter.clone()),
                ],
            });

            let logit: f64 = base_logit
                + season
                + DRIVERS
                    .iter()
                    .enumerate()
                    .map(|(k, name)| {
                        let s = &standardization[*name];
                        coef[k] * (d.0[k] - s.mean) / s.std
                    })
                    .sum::<f64>();
            let day = rng.random_range(1..=next.last_day().day0() + 1);
            let event_date = next.first_day().with_day(day).expect("day within month");
            if rng.random::<f64>() < sigmoid(logit) {
                let event_type = if rng.random::<f64>() < config.regretted_fraction {
                    EventType::TerminationRegretted
                } else {
                    EventType::TerminationUnregretted
                };
                events.push(Event {
                    employee_id: p.id.clone(),
                    event_date,
                    event_type,
                });
                n_terminations += 1;
                let team = p.team;
                people[slot] = Person::new(new_id(), team, 0.0, &mut rng);
                continue;
            }
            if rng.random::<f64>() < config.transfer_rate {
                events.push(Event {
                    employee_id: p.id.clone(),
                    event_date,
                    event_type: EventType::Transfer,
                });
                n_transfers += 1;
            }
            let p = &mut people[slot];
            p.tenure += 1.0;
            if p.job_level < 6.0 && rng.random::<f64>() < 0.01 {
                p.job_level += 1.0;
            }
            p.z_fav = ar_step(p.z_fav, &mut rng);
            p.z_unf = ar_step(p.z_unf, &mut rng);
            p.z_comp = ar_step(p.z_comp, &mut rng);
        }
        for z in team_churn.iter_mut() {
            *z = ar_step(*z, &mut rng);
        }
    }

    let n_rows = rows.len();
    let snapshots = SnapshotTable::new(synthetic_columns(), rows)?;
    let events = EventTable::new(events)?;
    let truth = TruthManifest {
        config: config.clone(),
        standardization,
        n_snapshot_rows: n_rows,
        n_terminations,
        n_transfers,
        realized_monthly_rate: n_terminations as f64 / n_rows as f64,
    };
    Ok((snapshots, events, truth))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPaths {
    pub snapshots: PathBuf,
    pub events: PathBuf,
    pub truth: PathBuf,
}

/// Generates an organization and writes `snapshots.csv`, `events.csv` and `truth.json` into `dir`.
pub fn write_synthetic_org(config: &SynthConfig, dir: &Path) -> Result<(SynthPaths, TruthManifest)> {
    let (snapshots, events, truth) = generate_synthetic_org(config)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = SynthPaths {
        snapshots: dir.join("snapshots.csv"),
        events: dir.join("events.csv"),
        truth: dir.join("truth.json"),
    };
    snapshots.write_csv_path(&paths.snapshots)?;
    events.write_csv_path(&paths.events)?;
    let json = serde_json::to_string_pretty(&truth)?;
    std::fs::write(&paths.truth, json).map_err(|e| Error::io(&paths.truth, e))?;
    Ok((paths, truth))
}

/// A ready-to-run pipeline config for an organization written by [`write_synthetic_org`].
///
/// The prediction month is the last generated month, so every label is resolvable
/// at the extraction date. The baseline model sees tenure, level, family and location.
pub fn synthetic_pipeline_config(config: &SynthConfig, paths: &SynthPaths, output_dir: PathBuf) -> PipelineConfig {
    let keys = vec!["job_family".to_string(), "location".to_string()];
    PipelineConfig {
        inputs: InputsConfig {
            snapshots: paths.snapshots.clone(),
            events: paths.events.clone(),
            schema: synthetic_schema(),
        },
        extraction_date: None,
        panel: PanelSpec {
            prediction_month: config.last_month(),
            horizon_months: 3,
            lookback_months: 12,
            outcome_type: OutcomeType::TotalAttrition,
        },
        split: SplitConfig {
            fractions: Fractions::default(),
            strata_keys: vec!["job_family".into()],
        },
        seed: config.seed,
        features: FeaturePlan::default(),
        imbalance: ImbalanceConfig::default(),
        gbdt: GbdtParams::default(),
        tuning: None,
        calibration: CalibrationConfig::default(),
        baseline_features: ["tenure", "job_level", "job_family", "location"].map(String::from).to_vec(),
        full_features: None,
        evaluation: EvaluationConfig {
            segment_keys: keys.clone(),
            ..Default::default()
        },
        report: ReportConfig { cut_keys: keys },
        explain: ExplainConfig::default(),
        output_dir,
    }
}
