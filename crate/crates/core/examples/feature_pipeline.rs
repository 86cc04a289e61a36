//! Turns one joined admission into model input: variable generation,
//! outlier removal, imputation and encoding, with per-variable provenance.

use anyhow::{Context, Result};
use ips::features::{prepare, RawValue, VariableSchema};
use ips::ingest::{JoinState, SourceBatch};
use ips::synthbench::{CohortSpec, PatientGenerator};

fn main() -> Result<()> {
    let schema = VariableSchema::demo();
    let mut generator = PatientGenerator::new(CohortSpec { seed: 3, ..CohortSpec::default() })?;
    let mut batch = SourceBatch::new(1);
    for record in generator.next_patient().records {
        batch.push(record);
    }
    let envelope = JoinState::new(0).apply(batch).envelopes.pop().context("patient did not join")?;

    let prepared = prepare(&envelope, &schema)?;
    println!("{:<22} {:>14} {:>10}  flags", "variable", "value", "encoded");
    for ((spec, feature), x) in schema.variables.iter().zip(&prepared.raw.features).zip(&prepared.input.0) {
        let value = match &feature.value {
            RawValue::Number(v) => format!("{v:.2}"),
            RawValue::Category(c) => c.clone(),
            RawValue::Missing => "-".into(),
        };
        let f = feature.flags;
        let mut flags = Vec::new();
        if f.observed {
            flags.push("observed");
        }
        if f.outlier_removed {
            flags.push("outlier");
        }
        if f.imputed {
            flags.push("imputed");
        }
        println!("{:<22} {:>14} {:>10.3}  {}", spec.name, value, x, flags.join(","));
    }
    for w in &prepared.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
