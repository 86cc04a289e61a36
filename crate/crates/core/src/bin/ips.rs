use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ips::domain::Timestamp;
use ips::features::VariableSchema;
use ips::ingest::{scan_sources, JoinState, SeenFileLedger, SourceConfig};
use ips::synthbench::{
    calibrate_dir, generate_cohort, run_benchmark, run_pipeline, write_calibration, BenchConfig, CalibrationConfig,
    CohortManifest, CohortSpec, ExclusionRules, PipelineConfig, MANIFEST_FILE,
};

#[derive(Parser)]
#[command(name = "ips", version, about = "Perioperative risk pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort (four CSV kinds plus labels.csv).
    Generate {
        #[arg(long, default_value_t = 1_000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        files_per_kind: usize,
        #[arg(long)]
        signal_strength: Option<f64>,
        /// Keep minors, short stays and ESRD admissions.
        #[arg(long)]
        no_exclusions: bool,
    },
    /// Fit schema statistics, the eight models and their cutoffs on a cohort.
    Calibrate {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Schema template; the bundled demo schema by default.
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "gam-1")]
        model_version: String,
        #[arg(long)]
        date: Option<String>,
    },
    /// Run the pipeline described by a TOML or JSON config until Ctrl-C.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Offer synthetic load to an in-process pipeline and report.
    Bench {
        /// Envelopes per minute.
        #[arg(long, default_value_t = 5_000.0)]
        rate: f64,
        /// Seconds of offered load.
        #[arg(long, default_value_t = 180.0)]
        duration: f64,
        #[arg(long, default_value_t = 1_000)]
        interval_ms: u64,
        #[arg(long, default_value_t = 4)]
        partitions: u32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Take the models section from this pipeline config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for bench_report.json and bench_report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scan source directories once, join, and print the join report.
    Ingest {
        #[arg(long = "source", required = true)]
        sources: Vec<PathBuf>,
    },
}

/// "synthetic cohort seed N, M admissions" when the cohort has a manifest.
fn dataset_label(dir: &std::path::Path) -> String {
    std::fs::read(dir.join(MANIFEST_FILE))
        .ok()
        .and_then(|b| serde_json::from_slice::<CohortManifest>(&b).ok())
        .map(|m| format!("synthetic cohort seed {}, {} admissions", m.seed, m.patients))
        .unwrap_or_else(|| dir.display().to_string())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate { n, seed, out, files_per_kind, signal_strength, no_exclusions } => {
            let mut spec = CohortSpec { n_patients: n, seed, files_per_kind, ..CohortSpec::default() };
            if let Some(s) = signal_strength {
                spec.signal_strength = s;
            }
            if no_exclusions {
                spec.exclusions = ExclusionRules { enabled: false, ..ExclusionRules::default() };
            }
            let manifest = generate_cohort(&spec, &out)?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
        Command::Calibrate { cohort, out, schema, folds, seed, model_version, date } => {
            let template = match schema {
                Some(p) => VariableSchema::load(&p)?,
                None => VariableSchema::demo(),
            };
            let config = CalibrationConfig {
                folds,
                seed,
                model_version,
                date,
                dataset: dataset_label(&cohort),
                ..CalibrationConfig::default()
            };
            let calibration = calibrate_dir(&cohort, &template, &config)?;
            write_calibration(&calibration, &out)?;
            for r in calibration.reports.values() {
                println!(
                    "{:<4} auroc {:.4} ± {:.4}  cutoff {:.4}  J {:.4}",
                    r.code.as_str(),
                    r.cv.mean_auroc,
                    r.cv.sd_auroc,
                    r.cutoff,
                    r.j
                );
            }
        }
        Command::Run { config } => {
            let config = PipelineConfig::load(&config)?;
            let handle = run_pipeline(config)?;
            if !handle.wait_healthy(Duration::from_secs(5)) {
                log::warn!("not all components up: {:?}", handle.health());
            }
            if let Some(addr) = handle.api_addr() {
                log::info!("api listening on http://{addr}");
            }
            if let Some(addr) = handle.bus_addr() {
                log::info!("bus listening on {addr}");
            }
            let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
            runtime.block_on(tokio::signal::ctrl_c()).context("waiting for Ctrl-C")?;
            log::info!("shutting down");
            let c = handle.shutdown();
            println!("{}", serde_json::to_string_pretty(&c)?);
            if !c.balanced() {
                bail!("envelope counts do not balance after drain");
            }
        }
        Command::Bench { rate, duration, interval_ms, partitions, seed, config, out } => {
            let bench = BenchConfig {
                rate_per_min: rate,
                duration_secs: duration,
                interval_ms,
                partitions,
                seed,
                ..BenchConfig::default()
            };
            let mut pipeline = bench.pipeline_config();
            if let Some(path) = config {
                pipeline.models = PipelineConfig::load(&path)?.models;
            }
            let handle = run_pipeline(pipeline)?;
            if !handle.wait_healthy(Duration::from_secs(5)) {
                bail!("pipeline unhealthy: {:?}", handle.health());
            }
            let report = run_benchmark(&handle, &bench);
            handle.shutdown();
            let report = report?;
            println!("{}", report.summary());
            if let Some(dir) = out {
                report.write(&dir)?;
            }
        }
        Command::Ingest { sources } => {
            let config = SourceConfig { dirs: sources };
            let batch = scan_sources(&config, &mut SeenFileLedger::in_memory(), 1, Timestamp::EPOCH)?;
            let malformed = batch.malformed_rows;
            let mut state = JoinState::new(0);
            let outcome = state.apply(batch);
            println!("{}", serde_json::to_string_pretty(&outcome.report)?);
            println!("malformed rows: {malformed}, ledger: {:?}", state.ledger());
        }
    }
    Ok(())
}
