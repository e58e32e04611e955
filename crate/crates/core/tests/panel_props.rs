use std::collections::BTreeSet;

use attrition_core::calendar::{add_months_end, YearMonth};
use attrition_core::ingest::{Event, EventTable};
use attrition_core::panel::{build_panel, leakage_audit, recompute_labels, OutcomeType, PanelSpec};
use attrition_core::pipeline::{generate_synthetic_org, SynthConfig};
use proptest::prelude::*;

fn org(seed: u64) -> SynthConfig {
    SynthConfig {
        n_employees: 60,
        n_months: 18,
        base_rate: 0.05,
        transfer_rate: 0.02,
        seed,
        ..Default::default()
    }
}

fn outcome() -> impl Strategy<Value = OutcomeType> {
    prop_oneof![
        Just(OutcomeType::Regretted),
        Just(OutcomeType::Unregretted),
        Just(OutcomeType::TotalAttrition),
        Just(OutcomeType::Transfer),
        Just(OutcomeType::TotalMovement),
    ]
}

fn spec(cfg: &SynthConfig, horizon: u32, lookback: u32, outcome_type: OutcomeType) -> PanelSpec {
    PanelSpec {
        prediction_month: cfg.last_month(),
        horizon_months: horizon,
        lookback_months: lookback,
        outcome_type,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn labels_are_reproducible_from_events(seed in 0u64..1000, h in 1u32..6, extra in 1u32..8, o in outcome()) {
        let cfg = org(seed);
        let (snap, events, _) = generate_synthetic_org(&cfg).unwrap();
        let panel = build_panel(&snap, &events, &spec(&cfg, h, h + extra, o), &[]).unwrap();
        prop_assert_eq!(recompute_labels(&panel, &events), panel.labels());
    }

    #[test]
    fn window_holds_lookback_minus_horizon_plus_one_months(seed in 0u64..1000, h in 1u32..6, extra in 1u32..8) {
        let cfg = org(seed);
        let (snap, events, _) = generate_synthetic_org(&cfg).unwrap();
        let s = spec(&cfg, h, h + extra, OutcomeType::TotalAttrition);
        let panel = build_panel(&snap, &events, &s, &[]).unwrap();
        let months: BTreeSet<YearMonth> = panel.rows.iter().map(|r| YearMonth::of(r.snapshot_date)).collect();
        prop_assert!(months.len() <= (extra + 1) as usize);
        let (first, last) = s.window();
        prop_assert!(months.iter().all(|m| *m >= first && *m <= last));
        let extraction = snap.latest_date().unwrap();
        prop_assert!(leakage_audit(&panel, extraction).is_empty());
    }

    #[test]
    fn pushing_events_past_the_horizon_clears_labels(seed in 0u64..1000, h in 1u32..5) {
        let cfg = org(seed);
        let (snap, events, _) = generate_synthetic_org(&cfg).unwrap();
        let panel = build_panel(&snap, &events, &spec(&cfg, h, h + 6, OutcomeType::TotalMovement), &[]).unwrap();
        let Some(target) = panel.rows.iter().find(|r| r.label == 1).map(|r| r.employee_id.clone()) else {
            return Ok(());
        };
        let last_snapshot = panel.rows.iter().filter(|r| r.employee_id == target).map(|r| r.snapshot_date).max().unwrap();
        let shifted: Vec<Event> = events
            .rows()
            .iter()
            .map(|e| {
                let mut e = e.clone();
                if e.employee_id == target {
                    e.event_date = add_months_end(last_snapshot, h as i64) + chrono::Duration::days(1);
                }
                e
            })
            .collect();
        let shifted = EventTable::new(shifted).unwrap();
        let labels = recompute_labels(&panel, &shifted);
        for (r, y) in panel.rows.iter().zip(&labels) {
            if r.employee_id == target {
                prop_assert_eq!(*y, 0);
            }
        }
    }
}

#[test]
fn build_is_deterministic() {
    let cfg = org(5);
    let (snap, events, _) = generate_synthetic_org(&cfg).unwrap();
    let s = spec(&cfg, 3, 12, OutcomeType::TotalAttrition);
    let keys = vec!["job_family".to_string()];
    let a = build_panel(&snap, &events, &s, &keys).unwrap();
    let b = build_panel(&snap, &events, &s, &keys).unwrap();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    a.write_csv(&mut x).unwrap();
    b.write_csv(&mut y).unwrap();
    assert_eq!(x, y);
    let header = String::from_utf8(x).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("employee_id,snapshot_date,label,stratum_job_family,tenure"), "{header}");
}

#[test]
fn extraction_before_label_resolution_is_flagged() {
    let cfg = org(6);
    let (snap, events, _) = generate_synthetic_org(&cfg).unwrap();
    let s = spec(&cfg, 3, 12, OutcomeType::TotalAttrition);
    let panel = build_panel(&snap, &events, &s, &[]).unwrap();
    let early = add_months_end(snap.latest_date().unwrap(), -1);
    let report = leakage_audit(&panel, early);
    assert!(!report.is_empty());
    let (_, last) = s.window();
    assert!(report.iter().all(|v| YearMonth::of(v.snapshot_date) == last));
}
