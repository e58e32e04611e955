//! Time-indexed panel construction with horizon labels, and the leakage audit.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::calendar::{add_months_end, YearMonth};
use crate::error::{invalid, Error, Result};
use crate::features::MISSING_CATEGORY;
use crate::ingest::{Column, ColumnKind, Event, EventTable, EventType, SnapshotTable, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeType {
    Regretted,
    Unregretted,
    TotalAttrition,
    Transfer,
    TotalMovement,
}

impl OutcomeType {
    pub fn matches(self, event: EventType) -> bool {
        use EventType::*;
        match self {
            OutcomeType::Regretted => event == TerminationRegretted,
            OutcomeType::Unregretted => event == TerminationUnregretted,
            OutcomeType::TotalAttrition => event.is_termination(),
            OutcomeType::Transfer => event == Transfer,
            OutcomeType::TotalMovement => true,
        }
    }
}

fn default_lookback() -> u32 {
    12
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelSpec {
    pub prediction_month: YearMonth,
    pub horizon_months: u32,
    #[serde(default = "default_lookback")]
    pub lookback_months: u32,
    pub outcome_type: OutcomeType,
}

impl PanelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon_months < 1 {
            return Err(Error::Config("horizon_months must be at least 1".into()));
        }
        if self.horizon_months >= self.lookback_months {
            return Err(Error::Config(format!(
                "horizon_months ({}) must be smaller than lookback_months ({}); the panel window would be empty",
                self.horizon_months, self.lookback_months
            )));
        }
        Ok(())
    }

    /// First and last snapshot month of the window, both inclusive.
    pub fn window(&self) -> (YearMonth, YearMonth) {
        (
            self.prediction_month.add_months(-(self.lookback_months as i64)),
            self.prediction_month.add_months(-(self.horizon_months as i64)),
        )
    }

    pub fn in_window(&self, date: NaiveDate) -> bool {
        let (start, end) = self.window();
        let m = YearMonth::of(date);
        start <= m && m <= end
    }

    /// Month-end at which a snapshot's label becomes known.
    pub fn label_resolution_date(&self, snapshot_date: NaiveDate) -> NaiveDate {
        add_months_end(snapshot_date, self.horizon_months as i64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub employee_id: String,
    pub snapshot_date: NaiveDate,
    pub label: u8,
    pub strata: BTreeMap<String, String>,
    /// Raw attribute values aligned with [`PanelDataset::columns`].
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub spec: PanelSpec,
    pub columns: Vec<Column>,
    pub strata_keys: Vec<String>,
    pub rows: Vec<PanelRow>,
    /// Termination date per employee, kept so the panel can be audited on its own.
    pub terminations: BTreeMap<String, NaiveDate>,
}

impl PanelDataset {
    pub fn feature_names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// Categorical value of `column` for a row, with missing mapped to the missing category.
    pub fn category(&self, row: usize, column: usize) -> String {
        match &self.rows[row].values[column] {
            Value::Cat(s) => s.clone(),
            Value::Num(x) => x.to_string(),
            Value::Missing => MISSING_CATEGORY.to_string(),
        }
    }

    /// Index of each employee's latest row.
    pub fn latest_row_per_employee(&self) -> BTreeMap<&str, usize> {
        let mut latest: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            latest
                .entry(r.employee_id.as_str())
                .and_modify(|j| {
                    if self.rows[*j].snapshot_date < r.snapshot_date {
                        *j = i;
                    }
                })
                .or_insert(i);
        }
        latest
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["employee_id".to_string(), "snapshot_date".into(), "label".into()];
        header.extend(self.strata_keys.iter().map(|k| format!("stratum_{k}")));
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        out.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.employee_id.clone(), r.snapshot_date.to_string(), r.label.to_string()];
            rec.extend(self.strata_keys.iter().map(|k| r.strata[k].clone()));
            rec.extend(r.values.iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("<panel writer>", e))?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

fn label_from_events(events: &[&Event], snapshot_date: NaiveDate, spec: &PanelSpec) -> u8 {
    let end = spec.label_resolution_date(snapshot_date);
    events
        .iter()
        .any(|e| {
            spec.outcome_type.matches(e.event_type)
                && e.event_date > snapshot_date
                && e.event_date <= end
        })
        .into()
}

/// Binary label for one (employee, snapshot) pair.
pub fn compute_label(
    employee_id: &str,
    snapshot_date: NaiveDate,
    spec: &PanelSpec,
    events: &EventTable,
) -> Result<u8> {
    let mine: Vec<&Event> = events
        .rows()
        .iter()
        .filter(|e| e.employee_id == employee_id)
        .collect();
    if let Some(t) = mine
        .iter()
        .find(|e| e.event_type.is_termination() && e.event_date <= snapshot_date)
    {
        return Err(invalid!(
            "employee {employee_id} terminated on {} at or before snapshot {snapshot_date}",
            t.event_date
        ));
    }
    Ok(label_from_events(&mine, snapshot_date, spec))
}

/// Joins snapshots in the spec window with their horizon labels.
///
/// Rows are ordered by (employee_id, snapshot_date). Snapshots dated on or
/// after the employee's termination are dropped.
pub fn build_panel(
    snapshots: &SnapshotTable,
    events: &EventTable,
    spec: &PanelSpec,
    strata_keys: &[String],
) -> Result<PanelDataset> {
    spec.validate()?;
    let strata_idx = strata_keys
        .iter()
        .map(|k| match snapshots.column(k) {
            Some(c) if c.kind == ColumnKind::Categorical => {
                Ok((k.clone(), snapshots.column_index(k).unwrap()))
            }
            Some(_) => Err(Error::Config(format!("stratum key {k:?} is not a categorical column"))),
            None => Err(Error::Config(format!("stratum key {k:?} is not in the snapshot schema"))),
        })
        .collect::<Result<Vec<_>>>()?;

    let terminations = events.terminations();
    let by_employee = events.by_employee();
    let mut rows: Vec<PanelRow> = snapshots
        .rows()
        .iter()
        .filter(|r| spec.in_window(r.snapshot_date))
        .filter(|r| {
            terminations
                .get(&r.employee_id)
                .is_none_or(|t| r.snapshot_date < *t)
        })
        .map(|r| {
            let mine = by_employee
                .get(r.employee_id.as_str())
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            PanelRow {
                employee_id: r.employee_id.clone(),
                snapshot_date: r.snapshot_date,
                label: label_from_events(mine, r.snapshot_date, spec),
                strata: strata_idx
                    .iter()
                    .map(|(k, i)| {
                        let v = match &r.values[*i] {
                            Value::Cat(s) => s.clone(),
                            _ => MISSING_CATEGORY.to_string(),
                        };
                        (k.clone(), v)
                    })
                    .collect(),
                values: r.values.clone(),
            }
        })
        .collect();
    if rows.is_empty() {
        let (start, end) = spec.window();
        return Err(Error::Validation(format!(
            "no snapshots fall in the panel window {start} through {end}"
        )));
    }
    rows.sort_by(|a, b| {
        (a.employee_id.as_str(), a.snapshot_date).cmp(&(b.employee_id.as_str(), b.snapshot_date))
    });

    Ok(PanelDataset {
        spec: *spec,
        columns: snapshots.columns().to_vec(),
        strata_keys: strata_keys.to_vec(),
        rows,
        terminations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// The row's label window ends after the extraction date.
    UnresolvableLabel,
    /// The row is dated on or after the employee's termination.
    PostTermination,
    /// The row's snapshot month is outside the panel window.
    OutsideWindow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub violation_kind: ViolationKind,
    pub employee_id: String,
    pub snapshot_date: NaiveDate,
}

/// Checks a panel for rows that could leak future information.
pub fn leakage_audit(panel: &PanelDataset, extraction_date: NaiveDate) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |kind, r: &PanelRow| {
        out.push(Violation {
            violation_kind: kind,
            employee_id: r.employee_id.clone(),
            snapshot_date: r.snapshot_date,
        })
    };
    for r in &panel.rows {
        if panel.spec.label_resolution_date(r.snapshot_date) > extraction_date {
            push(ViolationKind::UnresolvableLabel, r);
        }
        if panel
            .terminations
            .get(&r.employee_id)
            .is_some_and(|t| r.snapshot_date >= *t)
        {
            push(ViolationKind::PostTermination, r);
        }
        if !panel.spec.in_window(r.snapshot_date) {
            push(ViolationKind::OutsideWindow, r);
        }
    }
    out
}

/// Recomputes every label from the event table.
pub fn recompute_labels(panel: &PanelDataset, events: &EventTable) -> Vec<u8> {
    let by_employee: HashMap<&str, Vec<&Event>> = events.by_employee();
    panel
        .rows
        .iter()
        .map(|r| {
            let mine = by_employee
                .get(r.employee_id.as_str())
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            label_from_events(mine, r.snapshot_date, &panel.spec)
        })
        .collect()
}
