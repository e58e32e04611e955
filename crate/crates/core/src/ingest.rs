//! Snapshot and event table ingestion.
//!
//! Both tables are comma-separated with a header row. Cells that are empty or
//! the literal `NA` are missing; every other cell must parse as its declared
//! column type.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::calendar::{is_month_end, parse_date};
use crate::error::{Error, Result};

pub const EMPLOYEE_ID: &str = "employee_id";
pub const SNAPSHOT_DATE: &str = "snapshot_date";
pub const EVENT_DATE: &str = "event_date";
pub const EVENT_TYPE: &str = "event_type";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

/// Declared type of every snapshot attribute column.
pub type Schema = BTreeMap<String, ColumnKind>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Num(f64),
    Cat(String),
    Missing,
}

impl Value {
    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }

    pub fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_cat(&self) -> Option<&str> {
        match self {
            Value::Cat(s) => Some(s),
            _ => None,
        }
    }

    fn to_cell(&self) -> String {
        match self {
            Value::Num(x) => x.to_string(),
            Value::Cat(s) => s.clone(),
            Value::Missing => String::new(),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_cell())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotRow {
    pub employee_id: String,
    pub snapshot_date: NaiveDate,
    /// One entry per table column, in column order.
    pub values: Vec<Value>,
}

/// Per-employee, per-month-end attribute state.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotTable {
    columns: Vec<Column>,
    rows: Vec<SnapshotRow>,
}

impl SnapshotTable {
    /// Builds a table after checking key uniqueness, month-end dates,
    /// rectangularity and cell types.
    pub fn new(columns: Vec<Column>, rows: Vec<SnapshotRow>) -> Result<Self> {
        let mut names = HashSet::new();
        for c in &columns {
            if c.name == EMPLOYEE_ID || c.name == SNAPSHOT_DATE {
                return Err(Error::Validation(format!("reserved column name {:?}", c.name)));
            }
            if !names.insert(c.name.as_str()) {
                return Err(Error::Validation(format!("duplicate column {:?}", c.name)));
            }
        }
        let mut keys = HashSet::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.employee_id.is_empty() {
                return Err(Error::Validation(format!("row {}: empty employee_id", i + 1)));
            }
            if !is_month_end(row.snapshot_date) {
                return Err(Error::Validation(format!(
                    "row {}: snapshot_date {} for {} is not a month-end",
                    i + 1,
                    row.snapshot_date,
                    row.employee_id
                )));
            }
            if row.values.len() != columns.len() {
                return Err(Error::Validation(format!(
                    "row {}: expected {} attribute values, found {}",
                    i + 1,
                    columns.len(),
                    row.values.len()
                )));
            }
            for (v, c) in row.values.iter().zip(&columns) {
                let ok = match (v, c.kind) {
                    (Value::Missing, _) => true,
                    (Value::Num(x), ColumnKind::Numeric) => x.is_finite(),
                    (Value::Cat(_), ColumnKind::Categorical) => true,
                    _ => false,
                };
                if !ok {
                    return Err(Error::Validation(format!(
                        "row {}: value {v:?} does not match {:?} column {:?}",
                        i + 1,
                        c.kind,
                        c.name
                    )));
                }
            }
            if !keys.insert((row.employee_id.as_str(), row.snapshot_date)) {
                return Err(Error::Validation(format!(
                    "duplicate key ({}, {})",
                    row.employee_id, row.snapshot_date
                )));
            }
        }
        Ok(SnapshotTable { columns, rows })
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn rows(&self) -> &[SnapshotRow] {
        &self.rows
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn latest_date(&self) -> Option<NaiveDate> {
        self.rows.iter().map(|r| r.snapshot_date).max()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec![EMPLOYEE_ID.to_string(), SNAPSHOT_DATE.to_string()];
        header.extend(self.columns.iter().map(|c| c.name.clone()));
        out.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.employee_id.clone(), row.snapshot_date.to_string()];
            rec.extend(row.values.iter().map(Value::to_cell));
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("<snapshot writer>", e))?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn read_csv<R: Read>(r: R, schema: &Schema) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = rdr.headers()?.clone();
        if header.get(0) != Some(EMPLOYEE_ID) || header.get(1) != Some(SNAPSHOT_DATE) {
            return Err(Error::Validation(format!(
                "snapshot header must start with {EMPLOYEE_ID},{SNAPSHOT_DATE}"
            )));
        }
        let mut columns = Vec::with_capacity(header.len() - 2);
        for name in header.iter().skip(2) {
            let kind = schema.get(name).ok_or_else(|| {
                Error::Validation(format!("snapshot column {name:?} is not declared in the schema"))
            })?;
            columns.push(Column {
                name: name.to_string(),
                kind: *kind,
            });
        }
        for declared in schema.keys() {
            if !columns.iter().any(|c| &c.name == declared) {
                return Err(Error::Validation(format!(
                    "schema column {declared:?} is absent from the snapshot file"
                )));
            }
        }

        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let employee_id = rec[0].to_string();
            let snapshot_date = parse_date(&rec[1])
                .map_err(|e| Error::Validation(format!("line {line}, column {SNAPSHOT_DATE}: {e}")))?;
            let values = columns
                .iter()
                .zip(rec.iter().skip(2))
                .map(|(col, cell)| parse_cell(cell, col.kind).map_err(|e| {
                    Error::Validation(format!("line {line}, column {:?}: {e}", col.name))
                }))
                .collect::<Result<Vec<_>>>()?;
            rows.push(SnapshotRow {
                employee_id,
                snapshot_date,
                values,
            });
        }
        SnapshotTable::new(columns, rows)
    }
}

fn is_missing_marker(cell: &str) -> bool {
    cell.is_empty() || cell == "NA"
}

fn parse_cell(cell: &str, kind: ColumnKind) -> std::result::Result<Value, String> {
    if is_missing_marker(cell) {
        return Ok(Value::Missing);
    }
    match kind {
        ColumnKind::Numeric => match cell.trim().parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(Value::Num(x)),
            _ => Err(format!("cannot parse {cell:?} as a number")),
        },
        ColumnKind::Categorical => Ok(Value::Cat(cell.to_string())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    TerminationRegretted,
    TerminationUnregretted,
    Transfer,
}

impl EventType {
    pub fn is_termination(self) -> bool {
        !matches!(self, EventType::Transfer)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventType::TerminationRegretted => "termination_regretted",
            EventType::TerminationUnregretted => "termination_unregretted",
            EventType::Transfer => "transfer",
        }
    }
}

impl std::str::FromStr for EventType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "termination_regretted" => Ok(EventType::TerminationRegretted),
            "termination_unregretted" => Ok(EventType::TerminationUnregretted),
            "transfer" => Ok(EventType::Transfer),
            other => Err(Error::InvalidInput(format!("unknown event_type {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub employee_id: String,
    pub event_date: NaiveDate,
    pub event_type: EventType,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventTable {
    rows: Vec<Event>,
}

impl EventTable {
    pub fn new(rows: Vec<Event>) -> Result<Self> {
        let mut terminated: HashMap<&str, NaiveDate> = HashMap::new();
        for e in &rows {
            if e.employee_id.is_empty() {
                return Err(Error::Validation("event with empty employee_id".into()));
            }
            if e.event_type.is_termination() {
                if let Some(prev) = terminated.insert(&e.employee_id, e.event_date) {
                    return Err(Error::Validation(format!(
                        "employee {} has two termination events ({prev} and {})",
                        e.employee_id, e.event_date
                    )));
                }
            }
        }
        Ok(EventTable { rows })
    }

    pub fn rows(&self) -> &[Event] {
        &self.rows
    }

    /// Termination date per employee.
    pub fn terminations(&self) -> BTreeMap<String, NaiveDate> {
        self.rows
            .iter()
            .filter(|e| e.event_type.is_termination())
            .map(|e| (e.employee_id.clone(), e.event_date))
            .collect()
    }

    /// Events grouped by employee, each list sorted by date.
    pub fn by_employee(&self) -> HashMap<&str, Vec<&Event>> {
        let mut map: HashMap<&str, Vec<&Event>> = HashMap::new();
        for e in &self.rows {
            map.entry(e.employee_id.as_str()).or_default().push(e);
        }
        for list in map.values_mut() {
            list.sort_by_key(|e| (e.event_date, e.event_type));
        }
        map
    }

    pub fn latest_date(&self) -> Option<NaiveDate> {
        self.rows.iter().map(|e| e.event_date).max()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([EMPLOYEE_ID, EVENT_DATE, EVENT_TYPE])?;
        for e in &self.rows {
            out.write_record([
                e.employee_id.as_str(),
                &e.event_date.to_string(),
                e.event_type.as_str(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<event writer>", e))?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = rdr.headers()?.clone();
        let expected = [EMPLOYEE_ID, EVENT_DATE, EVENT_TYPE];
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Validation(format!(
                "event header must be {}",
                expected.join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let event_date = parse_date(&rec[1])
                .map_err(|e| Error::Validation(format!("line {line}, column {EVENT_DATE}: {e}")))?;
            let event_type = rec[2]
                .parse()
                .map_err(|e| Error::Validation(format!("line {line}, column {EVENT_TYPE}: {e}")))?;
            rows.push(Event {
                employee_id: rec[0].to_string(),
                event_date,
                event_type,
            });
        }
        EventTable::new(rows)
    }
}

/// Loads and validates both input tables.
pub fn load_tables(
    snapshot_path: &Path,
    event_path: &Path,
    schema: &Schema,
) -> Result<(SnapshotTable, EventTable)> {
    let open = |p: &Path| std::fs::File::open(p).map_err(|e| Error::io(p, e));
    let snapshots = SnapshotTable::read_csv(std::io::BufReader::new(open(snapshot_path)?), schema)?;
    let events = EventTable::read_csv(std::io::BufReader::new(open(event_path)?))?;
    Ok((snapshots, events))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        [
            ("tenure".to_string(), ColumnKind::Numeric),
            ("job_family".to_string(), ColumnKind::Categorical),
        ]
        .into_iter()
        .collect()
    }

    #[test]
    fn parses_well_formed_table() {
        let csv = "employee_id,snapshot_date,tenure,job_family\n\
                   E1,2023-01-31,12,Sales\n\
                   E1,2023-02-28,13,Sales\n\
                   E2,2023-01-31,3,Engineering\n";
        let t = SnapshotTable::read_csv(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(t.rows().len(), 3);
        assert_eq!(t.columns().len(), 2);
        assert_eq!(t.rows()[1].values[0], Value::Num(13.0));
        assert_eq!(t.rows()[2].values[1], Value::Cat("Engineering".into()));
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let csv = "employee_id,snapshot_date,tenure,job_family\n\
                   E1,2023-01-31,12,Sales\n\
                   E1,2023-01-31,12,Sales\n";
        let err = SnapshotTable::read_csv(csv.as_bytes(), &schema()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("duplicate key (E1, 2023-01-31)"), "{msg}");
    }

    #[test]
    fn empty_and_na_cells_are_missing() {
        let csv = "employee_id,snapshot_date,tenure,job_family\n\
                   E1,2023-01-31,,NA\n";
        let t = SnapshotTable::read_csv(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(t.rows()[0].values, vec![Value::Missing, Value::Missing]);
    }

    #[test]
    fn non_month_end_is_rejected() {
        let csv = "employee_id,snapshot_date,tenure,job_family\nE1,2023-01-30,1,A\n";
        let err = SnapshotTable::read_csv(csv.as_bytes(), &schema()).unwrap_err();
        assert!(err.to_string().contains("not a month-end"));
    }

    #[test]
    fn unparseable_cell_names_row_and_column() {
        let csv = "employee_id,snapshot_date,tenure,job_family\n\
                   E1,2023-01-31,1,A\n\
                   E2,2023-01-31,ten,A\n";
        let err = SnapshotTable::read_csv(csv.as_bytes(), &schema()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("tenure"), "{msg}");
    }

    #[test]
    fn undeclared_column_is_rejected() {
        let csv = "employee_id,snapshot_date,tenure,job_family,extra\nE1,2023-01-31,1,A,x\n";
        assert!(SnapshotTable::read_csv(csv.as_bytes(), &schema()).is_err());
    }

    #[test]
    fn two_terminations_rejected() {
        let csv = "employee_id,event_date,event_type\n\
                   E1,2023-03-15,termination_regretted\n\
                   E1,2023-04-15,termination_unregretted\n";
        let err = EventTable::read_csv(csv.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("two termination events"));
    }

    #[test]
    fn transfers_do_not_count_as_terminations() {
        let csv = "employee_id,event_date,event_type\n\
                   E1,2023-02-01,transfer\n\
                   E1,2023-03-15,termination_regretted\n\
                   E1,2023-03-20,transfer\n";
        let t = EventTable::read_csv(csv.as_bytes()).unwrap();
        assert_eq!(t.rows().len(), 3);
        assert_eq!(t.terminations().len(), 1);
    }

    #[test]
    fn unknown_event_type_rejected() {
        let csv = "employee_id,event_date,event_type\nE1,2023-02-01,promotion\n";
        assert!(EventTable::read_csv(csv.as_bytes()).is_err());
    }
}
