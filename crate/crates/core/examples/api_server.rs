//! Serves the REST feed over a store preloaded with scored admissions.
//!
//! cargo run --example api_server -- [port]
//! curl -H 'Authorization: Bearer demo-token' localhost:8080/v1/patients

use std::net::SocketAddr;
use std::sync::Arc;

use anyhow::Result;
use ips::api::{router, ApiConfig, ApiState, StaticHealth};
use ips::domain::{RiskProfile, SystemClock, Timestamp};
use ips::engine::{Metrics, Scorer};
use ips::features::VariableSchema;
use ips::ingest::{JoinState, SourceBatch};
use ips::models::{ModelSet, ThresholdTable};
use ips::store::Store;
use ips::synthbench::{CohortSpec, PatientGenerator};

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

#[tokio::main]
async fn main() -> Result<()> {
    let port: u16 = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(8080);
    let store = Arc::new(Store::in_memory(None));
    for profile in scored_profiles(20, 9)? {
        store.put_profile(&profile)?;
    }

    let config = ApiConfig {
        bind: SocketAddr::from(([127, 0, 0, 1], port)),
        tokens: [("demo-token".to_string(), "dr-demo".to_string())].into(),
        cors_origins: vec!["http://localhost:5173".into()],
        ..ApiConfig::default()
    };
    let state = ApiState {
        store,
        metrics: Arc::new(Metrics::default()),
        thresholds: Arc::new(ThresholdTable::published()),
        health: Arc::new(StaticHealth),
        clock: Arc::new(SystemClock),
        config: Arc::new(config.clone()),
    };
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    println!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).with_graceful_shutdown(async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
