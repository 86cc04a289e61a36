//! Scores one admission with the bundled models and published cutoffs and
//! prints each complication's probability, class and top contributors.

use anyhow::{Context, Result};
use ips::domain::ComplicationCode;
use ips::engine::Scorer;
use ips::features::VariableSchema;
use ips::ingest::{JoinState, SourceBatch};
use ips::models::{ModelSet, ThresholdTable};
use ips::synthbench::{CohortSpec, PatientGenerator};

fn main() -> Result<()> {
    let schema = VariableSchema::demo();
    let models = ModelSet::demo(&schema)?;
    let scorer = Scorer::new(schema, models, ThresholdTable::published())?;

    let mut generator = PatientGenerator::new(CohortSpec { seed: 21, ..CohortSpec::default() })?;
    let mut batch = SourceBatch::new(1);
    for record in generator.next_patient().records {
        batch.push(record);
    }
    let envelope = JoinState::new(0).apply(batch).envelopes.pop().context("patient did not join")?;
    let (profile, _) = scorer.score(&envelope)?;

    println!("{} ({} high-risk)", profile.key, profile.high_risk_count());
    for code in ComplicationCode::ALL {
        let p = profile.scores[&code];
        let top: Vec<String> = profile.contributors[&code]
            .iter()
            .take(3)
            .map(|c| format!("{} {:+.2}", c.feature, c.contribution))
            .collect();
        println!(
            "{:<4} p={p:.3} cutoff={:.2} {:?}  {}",
            code.as_str(),
            scorer.thresholds.cutoff(code),
            profile.classes[&code],
            top.join(", ")
        );
    }
    Ok(())
}
