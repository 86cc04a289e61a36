//! Fits the eight models on a synthetic cohort with stratified
//! cross-validation and picks each cutoff by the Youden index.
//!
//! cargo run --release --example youden_calibration -- [patients]

use anyhow::Result;
use ips::features::VariableSchema;
use ips::synthbench::{calibrate_dir, generate_cohort, write_calibration, CalibrationConfig, CohortSpec};

fn main() -> Result<()> {
    let n_patients = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(5_000);
    let cohort = tempfile::tempdir()?;
    generate_cohort(&CohortSpec { n_patients, seed: 2010, ..CohortSpec::default() }, cohort.path())?;

    let config = CalibrationConfig { folds: 5, ..CalibrationConfig::default() };
    let calibration = calibrate_dir(cohort.path(), &VariableSchema::demo(), &config)?;
    println!("{:<4} {:>6} {:>9} {:>13} {:>7} {:>6}", "code", "n+", "cv auroc", "fold cutoffs", "cutoff", "J");
    for r in calibration.reports.values() {
        let cutoffs = r.cv.folds.iter().map(|f| f.cutoff);
        let (lo, hi) = cutoffs.fold((1.0f64, 0.0f64), |(lo, hi), c| (lo.min(c), hi.max(c)));
        println!(
            "{:<4} {:>6} {:>9.4} {:>6.3}-{:<6.3} {:>7.4} {:>6.3}",
            r.code.as_str(),
            r.positives,
            r.cv.mean_auroc,
            lo,
            hi,
            r.cutoff,
            r.j
        );
    }

    let out = tempfile::tempdir()?;
    write_calibration(&calibration, out.path())?;
    println!("artifacts: {:?}", std::fs::read_dir(out.path())?.flatten().map(|e| e.file_name()).collect::<Vec<_>>());
    Ok(())
}
