//! Writes a synthetic cohort: four CSV kinds, labels.csv and a manifest.
//!
//! cargo run --example generate_cohort -- <out-dir> [patients] [seed]

use anyhow::{Context, Result};
use ips::synthbench::{generate_cohort, CohortSpec};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().context("usage: generate_cohort <out-dir> [patients] [seed]")?;
    let n_patients = args.next().map(|a| a.parse()).transpose()?.unwrap_or(1_000);
    let seed = args.next().map(|a| a.parse()).transpose()?.unwrap_or(1);

    let spec = CohortSpec { n_patients, seed, files_per_kind: 2, ..CohortSpec::default() };
    let manifest = generate_cohort(&spec, &out)?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}
