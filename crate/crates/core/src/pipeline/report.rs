use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One scored panel row entering the risk aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRow {
    pub employee_id: String,
    pub snapshot_date: NaiveDate,
    /// Values of the report's cut keys, in key order.
    pub cut_values: Vec<String>,
    pub probability: f64,
    pub label: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub cut_values: Vec<String>,
    pub n_employees: usize,
    pub expected_attrition: f64,
    pub mean_risk: f64,
    /// Realized label rate; present when every employee in the group has a label.
    pub actual_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub cut_keys: Vec<String>,
    pub rows: Vec<RiskRow>,
}

impl RiskReport {
    pub fn total_expected_attrition(&self) -> f64 {
        self.rows.iter().map(|r| r.expected_attrition).sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = self.cut_keys.clone();
        header.extend(["n_employees", "expected_attrition", "mean_risk", "actual_rate"].map(String::from));
        out.write_record(&header)?;
        for r in &self.rows {
            let mut rec = r.cut_values.clone();
            rec.push(r.n_employees.to_string());
            rec.push(r.expected_attrition.to_string());
            rec.push(r.mean_risk.to_string());
            rec.push(r.actual_rate.map(|x| x.to_string()).unwrap_or_default());
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("<risk report writer>", e))?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Groups employees by cut-key values using each employee's latest row only.
pub fn aggregate_risk(rows: &[ScoredRow], cut_keys: &[String]) -> Result<RiskReport> {
    let mut latest: BTreeMap<&str, &ScoredRow> = BTreeMap::new();
    for r in rows {
        if r.cut_values.len() != cut_keys.len() {
            return Err(invalid!(
                "row for {} carries {} cut values, expected {}",
                r.employee_id,
                r.cut_values.len(),
                cut_keys.len()
            ));
        }
        if !(0.0..=1.0).contains(&r.probability) {
            return Err(invalid!("probability {} for {} outside [0, 1]", r.probability, r.employee_id));
        }
        let slot = latest.entry(r.employee_id.as_str()).or_insert(r);
        if r.snapshot_date > slot.snapshot_date {
            *slot = r;
        }
    }
    let mut groups: BTreeMap<&[String], Vec<&ScoredRow>> = BTreeMap::new();
    for r in latest.into_values() {
        groups.entry(r.cut_values.as_slice()).or_default().push(r);
    }
    let rows = groups
        .into_iter()
        .map(|(cut, members)| {
            let n = members.len();
            let expected: f64 = members.iter().map(|r| r.probability).sum();
            let labels: Option<Vec<u8>> = members.iter().map(|r| r.label).collect();
            RiskRow {
                cut_values: cut.to_vec(),
                n_employees: n,
                expected_attrition: expected,
                mean_risk: expected / n as f64,
                actual_rate: labels.map(|ls| ls.iter().map(|&y| y as f64).sum::<f64>() / n as f64),
            }
        })
        .collect();
    Ok(RiskReport {
        cut_keys: cut_keys.to_vec(),
        rows,
    })
}
