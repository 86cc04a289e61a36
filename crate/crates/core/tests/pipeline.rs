//! Booting, feeding and stopping the assembled pipeline.

mod common;

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ips::synthbench::{
    generate_patients, run_benchmark, run_pipeline, write_cohort, BenchConfig, CohortSpec, PipelineConfig,
    PipelineHandle, SynthError,
};

fn demo_config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../config/demo.toml")
}

/// The shipped demo config with a free port and a private source directory.
fn demo_config(sources: &Path) -> PipelineConfig {
    let mut config = PipelineConfig::load(demo_config_path()).unwrap();
    config.api.bind = "127.0.0.1:0".into();
    config.ingest.sources = vec![sources.to_path_buf()];
    config.ingest.interval_ms = Some(100);
    config.engine.interval_ms = 100;
    config
}

fn http_get(addr: SocketAddr, path: &str, token: Option<&str>) -> (u16, String) {
    let mut stream = TcpStream::connect(addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let auth = token.map(|t| format!("Authorization: Bearer {t}\r\n")).unwrap_or_default();
    write!(stream, "GET {path} HTTP/1.1\r\nHost: localhost\r\n{auth}Connection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    let status = response.split_whitespace().nth(1).unwrap().parse().unwrap();
    let body = response.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    (status, body)
}

fn wait_for(timeout: Duration, mut done: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if done() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    done()
}

fn expect_startup_error(config: PipelineConfig) -> SynthError {
    match run_pipeline(config) {
        Ok(handle) => {
            handle.shutdown();
            panic!("pipeline started");
        }
        Err(e) => e,
    }
}

#[test]
fn demo_config_boots_and_scores_dropped_files() {
    let _serial = common::serial();
    let sources = tempfile::tempdir().unwrap();
    let handle = run_pipeline(demo_config(sources.path())).unwrap();
    let booted = Instant::now();
    assert!(handle.wait_healthy(Duration::from_secs(5)), "{:?}", handle.health());
    assert!(booted.elapsed() < Duration::from_secs(5));
    let health = handle.health();
    for component in ["api", "store", "bus", "engine", "producer"] {
        assert!(health.contains_key(component), "{component} missing from {health:?}");
    }

    let addr = handle.api_addr().unwrap();
    let (status, body) = http_get(addr, "/v1/health", None);
    assert_eq!(status, 200, "{body}");
    assert!(body.contains("\"status\":\"up\""));
    assert_eq!(http_get(addr, "/v1/patients", None).0, 401);

    let spec = CohortSpec { n_patients: 25, seed: 5, ..CohortSpec::default() };
    let cohort = generate_patients(&spec).unwrap();
    write_cohort(&cohort, &spec, sources.path()).unwrap();
    assert!(wait_for(Duration::from_secs(10), || handle.store.profile_count() == 25), "{}", handle.store.profile_count());

    let (status, body) = http_get(addr, "/v1/patients?limit=100", Some("demo-token"));
    assert_eq!(status, 200);
    let list: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(list.as_array().unwrap().len(), 25);

    let c = handle.shutdown();
    assert!(c.balanced(), "{c:?}");
    assert_eq!((c.published, c.scored, c.undelivered), (25, 25, 0));
}

#[test]
fn a_missing_model_is_fatal_and_named() {
    let models = tempfile::tempdir().unwrap();
    let assets = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/models");
    for entry in std::fs::read_dir(&assets).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap() != "sep.json" {
            std::fs::copy(&path, models.path().join(path.file_name().unwrap())).unwrap();
        }
    }
    let sources = tempfile::tempdir().unwrap();
    let mut config = demo_config(sources.path());
    config.models.models_dir = Some(models.path().to_path_buf());
    config.models.schema = Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/schema_demo.json"));
    let err = expect_startup_error(config);
    assert!(matches!(err, SynthError::Startup { .. }), "{err:?}");
    assert!(err.to_string().contains("SEP"), "{err}");
}

#[test]
fn a_busy_port_fails_at_startup() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let sources = tempfile::tempdir().unwrap();
    let mut config = demo_config(sources.path());
    config.api.bind = taken.local_addr().unwrap().to_string();
    let err = expect_startup_error(config);
    let text = err.to_string();
    assert!(text.starts_with("api"), "{text}");
    assert!(text.contains(&taken.local_addr().unwrap().port().to_string()), "{text}");
}

#[test]
fn a_disk_store_without_a_key_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = demo_config(dir.path());
    config.store.dir = Some(dir.path().join("store"));
    let err = expect_startup_error(config);
    assert!(err.to_string().starts_with("store"), "{err}");
}

#[test]
fn auth_without_tokens_is_refused() {
    let sources = tempfile::tempdir().unwrap();
    let mut config = demo_config(sources.path());
    config.api.tokens_file = None;
    config.api.tokens.clear();
    let err = expect_startup_error(config);
    assert!(err.to_string().starts_with("api"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    common::write_file(&path, "[engine]\ninterval = 5\n");
    let err = PipelineConfig::load(&path).unwrap_err();
    assert!(err.to_string().contains("interval"), "{err}");
}

fn inject(handle: &PipelineHandle, n: usize, seed: u64, pace: Duration) -> std::thread::JoinHandle<usize> {
    let injector = handle.injector().unwrap();
    let spec = CohortSpec { n_patients: n, seed, ..CohortSpec::default() };
    std::thread::spawn(move || {
        let mut generator = ips::synthbench::PatientGenerator::new(spec).unwrap();
        let mut sent = 0;
        for _ in 0..n {
            if !injector.send(generator.next_patient().records) {
                break;
            }
            sent += 1;
            std::thread::sleep(pace);
        }
        sent
    })
}

#[test]
fn shutdown_mid_stream_loses_nothing() {
    let _serial = common::serial();
    let dir = tempfile::tempdir().unwrap();
    let mut config = demo_config(dir.path());
    config.api.enabled = false;
    let handle = run_pipeline(config).unwrap();
    assert!(handle.wait_healthy(Duration::from_secs(5)));
    let feeder = inject(&handle, 400, 3, Duration::from_millis(2));
    std::thread::sleep(Duration::from_millis(350));
    let store = std::sync::Arc::clone(&handle.store);
    let c = handle.shutdown();
    let sent = feeder.join().unwrap();
    assert!(c.published > 0 && (c.published as usize) < 400, "{c:?}");
    assert!(c.balanced(), "{c:?}");
    assert_eq!(c.undelivered, 0);
    assert_eq!(store.profile_count() as u64, c.scored);
    // Everything the injector accepted before the stop reached the store.
    assert!(c.published as usize <= sent);
}

#[test]
fn two_pipelines_share_one_bus_over_tcp() {
    let _serial = common::serial();
    let dir = tempfile::tempdir().unwrap();
    let mut server = demo_config(dir.path());
    server.api.enabled = false;
    server.engine.enabled = false;
    server.ingest.enabled = false;
    server.bus.listen = Some("127.0.0.1:0".into());
    let bus = run_pipeline(server).unwrap();
    let addr = bus.bus_addr().unwrap();

    let mut client = demo_config(dir.path());
    client.api.enabled = false;
    client.bus.remote = Some(addr.to_string());
    let pipeline = run_pipeline(client).unwrap();
    assert!(pipeline.wait_healthy(Duration::from_secs(5)), "{:?}", pipeline.health());
    inject(&pipeline, 30, 8, Duration::ZERO).join().unwrap();
    assert!(wait_for(Duration::from_secs(10), || pipeline.store.profile_count() == 30));
    let c = pipeline.shutdown();
    assert!(c.balanced(), "{c:?}");
    let broker = bus.broker().unwrap();
    let topic = broker.topic("admissions").unwrap();
    let total: u64 = (0..topic.partitions).map(|p| broker.watermarks("admissions", p).unwrap().1).sum();
    assert_eq!(total, 30);
    bus.shutdown();
}

#[test]
fn low_rate_bench_meets_its_rate_and_latency() {
    let _serial = common::serial();
    let bench = BenchConfig { rate_per_min: 60.0, duration_secs: 20.0, interval_ms: 500, ..BenchConfig::default() };
    let handle = run_pipeline(bench.pipeline_config()).unwrap();
    assert!(handle.wait_healthy(Duration::from_secs(5)));
    let report = run_benchmark(&handle, &bench).unwrap();
    let c = handle.shutdown();
    assert_eq!(report.offered, 20);
    assert_eq!(report.lost, 0, "{}", report.summary());
    assert_eq!(report.stored, 20);
    assert!((report.achieved_per_min - 60.0).abs() <= 1.0, "{}", report.summary());
    assert!(report.latency_ms.p99 < 1_000, "{}", report.summary());
    assert!(c.balanced());

    let out = tempfile::tempdir().unwrap();
    report.write(out.path()).unwrap();
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.path().join("bench_report.json")).unwrap()).unwrap();
    assert_eq!(json["offered"], 20);
    assert!(std::fs::read_to_string(out.path().join("bench_report.txt")).unwrap().contains("lost 0"));
}

#[test]
fn bench_refuses_an_unhealthy_pipeline() {
    let bench = BenchConfig { rate_per_min: 60.0, duration_secs: 1.0, ..BenchConfig::default() };
    let mut config = bench.pipeline_config();
    config.engine.enabled = false;
    config.ingest.enabled = false;
    let handle = run_pipeline(config).unwrap();
    let err = run_benchmark(&handle, &bench).unwrap_err();
    assert!(matches!(err, SynthError::Unhealthy(_)), "{err:?}");
    handle.shutdown();
}
