//! Boots the full pipeline in-process, offers synthetic load through the
//! producer, and reports throughput, loss and end-to-end latency.
//!
//! cargo run --release --example end_to_end -- [rate-per-min] [seconds]

use std::time::Duration;

use anyhow::{bail, Result};
use ips::synthbench::{run_benchmark, run_pipeline, BenchConfig};

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let rate_per_min = args.next().map(|a| a.parse()).transpose()?.unwrap_or(600.0);
    let duration_secs = args.next().map(|a| a.parse()).transpose()?.unwrap_or(15.0);
    let bench = BenchConfig { rate_per_min, duration_secs, interval_ms: 500, ..BenchConfig::default() };

    let handle = run_pipeline(bench.pipeline_config())?;
    if !handle.wait_healthy(Duration::from_secs(5)) {
        bail!("pipeline unhealthy: {:?}", handle.health());
    }
    let report = run_benchmark(&handle, &bench);
    let conservation = handle.shutdown();
    println!("{}", report?.summary());
    println!("{}", serde_json::to_string_pretty(&conservation)?);
    Ok(())
}
