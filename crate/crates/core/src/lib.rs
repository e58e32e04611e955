//! Leakage-safe workforce attrition modeling.
//!
//! The crate covers the whole path from raw HR tables to aggregated risk:
//!
//! * [`ingest`] parses the snapshot and event tables,
//! * [`panel`] builds the (employee, month-end) panel with horizon labels and audits it for leakage,
//! * [`split`] assigns employees to train/valid/test folds,
//! * [`features`] encodes, imputes and rebalances,
//! * [`gbdt`] trains the histogram gradient-boosted classifier,
//! * [`calibrate`] maps scores to probabilities,
//! * [`evaluate`] computes imbalance-aware metrics,
//! * [`explain`] computes tree SHAP values, importances and partial dependence,
//! * [`pipeline`] orchestrates a full run and generates synthetic organizations.

pub mod calendar;
pub mod calibrate;
pub mod error;
pub mod evaluate;
pub mod explain;
pub mod features;
pub mod gbdt;
pub mod matrix;
pub mod ingest;
pub mod panel;
pub mod pipeline;
pub mod split;

pub use error::{Error, Result};
