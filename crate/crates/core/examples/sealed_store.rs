//! A disk-backed profile store whose values are sealed with AES-256-GCM.
//! Writes a profile, reopens the store from its log, and checks that the
//! profile body never reaches disk in plaintext. Keys stay readable so the
//! index can be rebuilt by scanning.

use anyhow::{ensure, Result};
use ips::domain::{RiskProfile, Timestamp};
use ips::engine::Scorer;
use ips::features::VariableSchema;
use ips::ingest::{JoinState, SourceBatch};
use ips::models::{ModelSet, ThresholdTable};
use ips::synthbench::{CohortSpec, PatientGenerator};
use ips::store::{Keyring, Sealer, Store, StoreConfig};

fn scored_profiles(n: usize, seed: u64) -> Result<Vec<RiskProfile>> {
    let schema = VariableSchema::demo();
    let models = ModelSet::demo(&schema)?;
    let scorer = Scorer::new(schema, models, ThresholdTable::published())?;
    let mut generator = PatientGenerator::new(CohortSpec { n_patients: n, seed, ..CohortSpec::default() })?;
    let mut batch = SourceBatch::new(1);
    for _ in 0..n {
        for record in generator.next_patient().records {
            batch.push(record);
        }
    }
    let mut profiles = Vec::new();
    for (i, mut envelope) in JoinState::new(0).apply(batch).envelopes.into_iter().enumerate() {
        envelope.produced_at = Timestamp(1_760_000_000_000 + i as i64 * 1_000);
        profiles.push(scorer.score(&envelope)?.0);
    }
    Ok(profiles)
}

fn main() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let key = Keyring::generate_key();
    let sealer = || Sealer::new(Keyring::with_key("k1", key), "k1");

    let profile = scored_profiles(1, 4)?.remove(0);

    {
        let store = Store::open(StoreConfig::disk(dir.path()), Some(sealer()?))?;
        let version = store.put_profile(&profile)?;
        println!("wrote {} as version {version}", profile.key);
    }

    let reopened = Store::open(StoreConfig::disk(dir.path()), Some(sealer()?))?;
    ensure!(reopened.get_profile(&profile.key)?.as_ref() == Some(&profile), "profile did not survive reopen");
    println!("reopened: {} profiles, seq {}", reopened.profile_count(), reopened.current_seq());

    let needle = profile.model_version.as_bytes();
    for entry in std::fs::read_dir(dir.path())?.flatten() {
        let bytes = std::fs::read(entry.path())?;
        let leaked = bytes.windows(needle.len()).any(|w| w == needle);
        println!("{:?}: {} bytes, plaintext profile body present: {leaked}", entry.file_name(), bytes.len());
    }

    let wrong = Store::open(StoreConfig::disk(dir.path()), Some(Sealer::ephemeral()));
    println!("open with a different key: {}", wrong.err().map_or("succeeded".to_string(), |e| e.to_string()));
    Ok(())
}
