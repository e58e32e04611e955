//! End-to-end orchestration from one JSON config, plus the synthetic
//! organization generator used as a test bed.

mod config;
mod report;
mod run;
mod synth;

pub use config::{
    CalibrationConfig, EvaluationConfig, ExplainConfig, ImbalanceConfig, InputsConfig, PipelineConfig, ReportConfig,
    SmoteConfig, SplitConfig,
};
pub use report::{aggregate_risk, RiskReport, RiskRow, ScoredRow};
pub use run::{
    run_pipeline, AuditReport, FoldMetrics, MetricsFile, ModelMetrics, RateMape, RunCounts, RunManifest, RunSummary,
    ShapSummary, Stage,
};
pub use synth::{
    generate_synthetic_org, planted_coefficients, synthetic_pipeline_config, synthetic_columns, synthetic_schema, write_synthetic_org,
    Standardization, SynthConfig, SynthPaths, TruthManifest, DRIVERS,
};
