use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attrition_core::pipeline::{
    run_pipeline, synthetic_pipeline_config, write_synthetic_org, PipelineConfig, RunManifest, Stage, SynthConfig,
    SynthPaths,
};
use attrition_core::Error;
use clap::{Args, Parser, Subcommand};

/// Leakage-safe attrition modeling from HR snapshot and event tables.
///
/// Every pipeline subcommand reruns the stages before it from the same config,
/// so its outputs are always consistent with the inputs.
#[derive(Debug, Parser)]
#[command(name = "attrition", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline config (JSON). Relative paths inside it resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for splitting, resampling and training; overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic organization with planted attrition drivers.
    ///
    /// Writes snapshots.csv, events.csv, truth.json and a pipeline.json that
    /// runs the full pipeline on them.
    Synth {
        /// Generator settings (JSON); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the (employee, month-end) panel and run the leakage audit.
    ///
    /// The snapshot window runs from prediction_month - lookback_months to
    /// prediction_month - horizon_months, both ends inclusive, giving
    /// lookback_months - horizon_months + 1 snapshot months.
    BuildPanel(Common),
    /// Build the panel and assign employees to train/valid/test folds.
    Split(Common),
    /// Train the full and baseline models.
    Train(Common),
    /// Train, then fit calibrators on the validation fold.
    Calibrate(Common),
    /// Train, calibrate and compute metrics for every fold.
    Evaluate(Common),
    /// Everything up to SHAP values, importances and partial dependence.
    Explain(Common),
    /// Everything up to the aggregated risk report.
    Report(Common),
    /// Run the full pipeline.
    Run(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Json(_) | Error::Io { .. } => 1,
        Error::Validation(_) | Error::InvalidInput(_) | Error::Csv(_) => 2,
        Error::Stage { .. } => 3,
    }
}

fn run_stage(common: &Common, until: Stage) -> Result<RunManifest, Error> {
    let mut config = PipelineConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    run_pipeline(&config, until)
}

fn synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), Error> {
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<SynthConfig>(&text)
                .map_err(|e| Error::Config(format!("cannot parse synthetic config: {e}")))?
        }
        None => SynthConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let (_, truth) = write_synthetic_org(&cfg, out)?;
    // Relative paths keep the generated directory relocatable.
    let relative = SynthPaths {
        snapshots: "snapshots.csv".into(),
        events: "events.csv".into(),
        truth: "truth.json".into(),
    };
    let pipeline = synthetic_pipeline_config(&cfg, &relative, "run".into());
    let path = out.join("pipeline.json");
    let text = serde_json::to_string_pretty(&pipeline)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    println!(
        "wrote {} snapshot rows, {} terminations, {} transfers to {}",
        truth.n_snapshot_rows,
        truth.n_terminations,
        truth.n_transfers,
        out.display()
    );
    Ok(())
}

fn report(manifest: &RunManifest, out: &Path) {
    println!("completed stage `{}`; outputs in {}", manifest.completed_stage, out.display());
    let s = &manifest.summary;
    let fmt = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    if manifest.completed_stage >= Stage::Evaluate {
        println!(
            "test AUC-PR full {} baseline {}; Brier uncalibrated {} calibrated {}",
            fmt(s.test_auc_pr_full),
            fmt(s.test_auc_pr_baseline),
            fmt(s.test_brier_full_uncalibrated),
            fmt(s.test_brier_full_calibrated)
        );
    }
    for w in &manifest.split_warnings {
        println!("warning: {w}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (common, until) = match &cli.command {
        Command::Synth { config, out, seed } => {
            return match synth(config.as_deref(), out, *seed) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(&e),
            };
        }
        Command::BuildPanel(c) => (c, Stage::Panel),
        Command::Split(c) => (c, Stage::Split),
        Command::Train(c) => (c, Stage::Train),
        Command::Calibrate(c) => (c, Stage::Calibrate),
        Command::Evaluate(c) => (c, Stage::Evaluate),
        Command::Explain(c) => (c, Stage::Explain),
        Command::Report(c) | Command::Run(c) => (c, Stage::Report),
    };
    match run_stage(common, until) {
        Ok(manifest) => {
            report(&manifest, &manifest.config.output_dir);
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(e))
}
