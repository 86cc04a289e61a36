//! Serves an in-memory partitioned log over TCP and drives it with a
//! client: keyed appends, a per-partition poll, and a group commit.

use std::sync::Arc;
use std::time::Duration;

use anyhow::Result;
use ips::streambus::{Broker, BusClient, BusConsumer, BusProducer, BusServer};

fn main() -> Result<()> {
    let broker = Arc::new(Broker::in_memory());
    let server = BusServer::bind("127.0.0.1:0", Arc::clone(&broker), None)?;
    let client = BusClient::new(server.local_addr(), None)?;
    println!("broker on {}", server.local_addr());

    client.create_topic("admissions", 4, 10_000)?;
    for i in 0..12 {
        let key = format!("patient-{}", i % 5);
        let (partition, offset) = client.append("admissions", key.as_bytes(), format!("event {i}").as_bytes())?;
        println!("{key} -> partition {partition} offset {offset}");
    }

    for partition in 0..4 {
        let polled = client.poll_partition("admissions", "demo", partition, 100, Duration::ZERO)?;
        let Some(last) = polled.records.last() else { continue };
        for r in &polled.records {
            println!("p{partition}@{} {}", r.offset, String::from_utf8_lossy(&r.payload));
        }
        client.commit("demo", "admissions", partition, last.offset)?;
    }
    println!("group state: {:?}", broker.group_state("demo"));
    server.shutdown();
    Ok(())
}
