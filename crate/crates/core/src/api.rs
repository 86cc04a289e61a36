//! REST surface between clients and the engine's store: patient list, risk
//! profiles, physician feedback, a long-poll update feed, health and metrics.
//!
//! Every `/v1` route except `/v1/health` needs `Authorization: Bearer <token>`;
//! tokens map to clinician ids used as feedback authors. Only derived data
//! (scores, classes, contributors, feedback) is ever returned.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Extension, Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

use crate::domain::{AdmissionKey, Clock, ComplicationCode, Contributor, Feedback, RiskClass, Timestamp};
use crate::engine::{Metrics, MetricsSnapshot};
use crate::models::ThresholdTable;
use crate::store::{Store, UpdateEvent};

pub const DEFAULT_PAGE_SIZE: usize = 100;
pub const DEFAULT_LIST_LIMIT: usize = 50;
pub const MAX_LIST_LIMIT: usize = 1_000;

#[derive(Debug, thiserror::Error)]
pub enum ApiConfigError {
    #[error("auth enabled but no tokens configured")]
    NoTokens,
    #[error("tokens file {path}: {message}")]
    TokensFile { path: String, message: String },
}

#[derive(Clone, Debug)]
pub struct ApiConfig {
    pub bind: SocketAddr,
    pub auth_enabled: bool,
    /// token → clinician id
    pub tokens: BTreeMap<String, String>,
    /// `*` allows any origin.
    pub cors_origins: Vec<String>,
    pub poll_page_size: usize,
    pub long_poll_timeout: Duration,
    pub static_dir: Option<PathBuf>,
}

impl Default for ApiConfig {
    fn default() -> Self {
        ApiConfig {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            auth_enabled: true,
            tokens: BTreeMap::new(),
            cors_origins: Vec::new(),
            poll_page_size: DEFAULT_PAGE_SIZE,
            long_poll_timeout: Duration::from_secs(25),
            static_dir: None,
        }
    }
}

impl ApiConfig {
    pub fn validate(&self) -> Result<(), ApiConfigError> {
        if self.auth_enabled && self.tokens.is_empty() {
            return Err(ApiConfigError::NoTokens);
        }
        Ok(())
    }

    /// `token clinician` per line; `#` comments and blank lines skipped.
    pub fn parse_tokens(text: &str) -> Result<BTreeMap<String, String>, String> {
        let mut out = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(token), Some(clinician), None) => {
                    out.insert(token.to_string(), clinician.to_string());
                }
                _ => return Err(format!("line {}: expected `token clinician`", n + 1)),
            }
        }
        Ok(out)
    }

    pub fn load_tokens(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>, ApiConfigError> {
        let path = path.as_ref();
        let err = |message: String| ApiConfigError::TokensFile { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        Self::parse_tokens(&text).map_err(err)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentStatus {
    Up,
    Down,
}

/// Reports the liveness of pipeline components for `/v1/health`.
pub trait HealthProbe: Send + Sync {
    fn components(&self) -> BTreeMap<String, ComponentStatus>;
}

/// Reports every component up; for an API running on its own.
pub struct StaticHealth;

impl HealthProbe for StaticHealth {
    fn components(&self) -> BTreeMap<String, ComponentStatus> {
        ["api", "store"].into_iter().map(|c| (c.to_string(), ComponentStatus::Up)).collect()
    }
}

#[derive(Clone)]
pub struct ApiState {
    pub store: Arc<Store>,
    pub metrics: Arc<Metrics>,
    pub thresholds: Arc<ThresholdTable>,
    pub health: Arc<dyn HealthProbe>,
    pub clock: Arc<dyn Clock>,
    pub config: Arc<ApiConfig>,
}

#[derive(Clone, Debug)]
struct Clinician(String);

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn require_token(State(state): State<ApiState>, mut req: Request, next: Next) -> Response {
    if !state.config.auth_enabled {
        req.extensions_mut().insert(Clinician("anonymous".into()));
        return next.run(req).await;
    }
    let token = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim);
    match token.and_then(|t| state.config.tokens.get(t)) {
        Some(clinician) => {
            req.extensions_mut().insert(Clinician(clinician.clone()));
            next.run(req).await
        }
        None => error(StatusCode::UNAUTHORIZED, "unauthorized"),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PatientSummary {
    pub patient_id: String,
    pub admission_id: String,
    pub scored_at: Timestamp,
    pub high_risk_count: usize,
}

#[derive(Deserialize)]
struct ListQuery {
    since: Option<String>,
    limit: Option<String>,
}

async fn list_patients(State(state): State<ApiState>, Query(q): Query<ListQuery>) -> Response {
    let since = match q.since.as_deref().map(str::trim).filter(|s| !s.is_empty()) {
        None => None,
        Some(s) => match Timestamp::parse_iso(s) {
            Ok(t) => Some(t),
            Err(_) => return error(StatusCode::BAD_REQUEST, format!("malformed since: {s}")),
        },
    };
    let limit = match q.limit.as_deref() {
        None => DEFAULT_LIST_LIMIT,
        Some(l) => match l.parse::<usize>() {
            Ok(n) if n >= 1 => n.min(MAX_LIST_LIMIT),
            _ => return error(StatusCode::BAD_REQUEST, format!("malformed limit: {l}")),
        },
    };
    match state.store.list_recent(limit, since) {
        Ok(entries) => Json(
            entries
                .into_iter()
                .map(|e| PatientSummary {
                    patient_id: e.key.patient_id,
                    admission_id: e.key.admission_id,
                    scored_at: e.scored_at,
                    high_risk_count: e.high_risk_count,
                })
                .collect::<Vec<_>>(),
        )
        .into_response(),
        Err(e) => internal(e),
    }
}

fn internal(e: impl std::fmt::Display) -> Response {
    log::error!("api: {e}");
    error(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ComplicationRisk {
    pub code: ComplicationCode,
    pub name: String,
    pub probability: f64,
    pub class: RiskClass,
    pub cutoff: f64,
    pub contributors: Vec<Contributor>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeedbackView {
    pub author: String,
    pub adjusted: BTreeMap<ComplicationCode, f64>,
    pub note: String,
    pub submitted_at: Timestamp,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RiskView {
    pub patient_id: String,
    pub admission_id: String,
    pub admitted_at: Timestamp,
    pub scored_at: Timestamp,
    pub model_version: String,
    pub high_risk_count: usize,
    pub complications: Vec<ComplicationRisk>,
    pub feedback: Option<FeedbackView>,
}

fn lookup_key(pid: &str, aid: &str) -> AdmissionKey {
    AdmissionKey::new(pid, aid, Timestamp::EPOCH)
}

async fn get_risk(State(state): State<ApiState>, UrlPath((pid, aid)): UrlPath<(String, String)>) -> Response {
    let key = lookup_key(&pid, &aid);
    let profile = match state.store.get_profile(&key) {
        Ok(Some(p)) => p,
        Ok(None) => return error(StatusCode::NOT_FOUND, "unknown admission"),
        Err(e) => return internal(e),
    };
    let feedback = match state.store.get_feedback(&key) {
        Ok(list) => list.into_iter().last().map(|f| FeedbackView {
            author: f.author,
            adjusted: f.adjusted,
            note: f.note,
            submitted_at: f.submitted_at,
        }),
        Err(e) => return internal(e),
    };
    let complications = ComplicationCode::ALL
        .into_iter()
        .map(|code| ComplicationRisk {
            code,
            name: code.display_name().to_string(),
            probability: profile.scores[&code],
            class: profile.classes[&code],
            cutoff: state.thresholds.cutoff(code),
            contributors: profile.contributors.get(&code).cloned().unwrap_or_default(),
        })
        .collect();
    Json(RiskView {
        patient_id: profile.key.patient_id.clone(),
        admission_id: profile.key.admission_id.clone(),
        admitted_at: profile.key.admitted_at,
        scored_at: profile.scored_at,
        model_version: profile.model_version.clone(),
        high_risk_count: profile.high_risk_count(),
        complications,
        feedback,
    })
    .into_response()
}

/// Body of a feedback POST. Other Feedback fields, if sent, are ignored:
/// the key comes from the path, the author from the token.
#[derive(Debug, Deserialize)]
struct FeedbackBody {
    adjusted: BTreeMap<String, f64>,
    #[serde(default)]
    note: String,
}

async fn post_feedback(
    State(state): State<ApiState>,
    Extension(clinician): Extension<Clinician>,
    UrlPath((pid, aid)): UrlPath<(String, String)>,
    body: Bytes,
) -> Response {
    let parsed: FeedbackBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed body: {e}")),
    };
    let mut adjusted = BTreeMap::new();
    for (code, value) in parsed.adjusted {
        match code.parse::<ComplicationCode>() {
            Ok(c) => {
                adjusted.insert(c, value);
            }
            Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
        }
    }
    let key = match state.store.get_profile(&lookup_key(&pid, &aid)) {
        Ok(Some(p)) => p.key,
        Ok(None) => lookup_key(&pid, &aid),
        Err(e) => return internal(e),
    };
    let feedback = Feedback { key, author: clinician.0, adjusted, note: parsed.note, submitted_at: state.clock.now() };
    if let Err(e) = feedback.validate() {
        return error(StatusCode::BAD_REQUEST, e.to_string());
    }
    match state.store.put_feedback(&feedback) {
        Ok(version) => (StatusCode::CREATED, Json(json!({ "version": version }))).into_response(),
        Err(e) => internal(e),
    }
}

#[derive(Deserialize)]
struct UpdatesQuery {
    cursor: Option<String>,
    timeout_ms: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UpdatesPage {
    pub events: Vec<UpdateEvent>,
    pub next_cursor: u64,
}

async fn get_updates(State(state): State<ApiState>, Query(q): Query<UpdatesQuery>) -> Response {
    let current = state.store.current_seq();
    let cursor = match q.cursor.as_deref() {
        None | Some("") => 0,
        Some(c) => match c.parse::<u64>() {
            Ok(v) if v <= current => v,
            _ => return error(StatusCode::BAD_REQUEST, format!("invalid cursor: {c}")),
        },
    };
    let timeout = match q.timeout_ms.as_deref() {
        None => state.config.long_poll_timeout,
        Some(t) => match t.parse::<u64>() {
            Ok(ms) => Duration::from_millis(ms).min(state.config.long_poll_timeout),
            Err(_) => return error(StatusCode::BAD_REQUEST, format!("invalid timeout_ms: {t}")),
        },
    };
    let page = state.config.poll_page_size;
    let deadline = tokio::time::Instant::now() + timeout;
    let notify = state.store.write_notifier();
    loop {
        let notified = notify.notified();
        tokio::pin!(notified);
        notified.as_mut().enable();
        let events = state.store.updates_since(cursor, page);
        if !events.is_empty() {
            let next_cursor = events.last().map_or(cursor, |e| e.seq);
            return Json(UpdatesPage { events, next_cursor }).into_response();
        }
        if tokio::time::timeout_at(deadline, notified).await.is_err() {
            return Json(UpdatesPage { events: Vec::new(), next_cursor: cursor }).into_response();
        }
    }
}

#[derive(Debug, Serialize)]
pub struct HealthView {
    pub status: ComponentStatus,
    pub components: BTreeMap<String, ComponentStatus>,
}

async fn health(State(state): State<ApiState>) -> Response {
    let mut components = state.health.components();
    components.insert("api".into(), ComponentStatus::Up);
    let status =
        if components.values().all(|c| *c == ComponentStatus::Up) { ComponentStatus::Up } else { ComponentStatus::Down };
    let code = if status == ComponentStatus::Up { StatusCode::OK } else { StatusCode::SERVICE_UNAVAILABLE };
    (code, Json(HealthView { status, components })).into_response()
}

#[derive(Debug, Serialize)]
pub struct MetricsView {
    #[serde(flatten)]
    pub pipeline: MetricsSnapshot,
    pub profiles_stored: usize,
    pub store_seq: u64,
    pub unknown_feedback_keys: u64,
}

async fn metrics(State(state): State<ApiState>) -> Response {
    Json(MetricsView {
        pipeline: state.metrics.snapshot(),
        profiles_stored: state.store.profile_count(),
        store_seq: state.store.current_seq(),
        unknown_feedback_keys: state.store.unknown_feedback_keys(),
    })
    .into_response()
}

fn cors_layer(origins: &[String]) -> Option<CorsLayer> {
    if origins.is_empty() {
        return None;
    }
    let allow = if origins.iter().any(|o| o == "*") {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    Some(
        CorsLayer::new()
            .allow_origin(allow)
            .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
            .allow_headers([header::AUTHORIZATION, header::CONTENT_TYPE]),
    )
}

pub fn router(state: ApiState) -> Router {
    let protected = Router::new()
        .route("/v1/patients", get(list_patients))
        .route("/v1/patients/{pid}/{aid}/risk", get(get_risk))
        .route("/v1/patients/{pid}/{aid}/feedback", post(post_feedback))
        .route("/v1/updates", get(get_updates))
        .route("/v1/metrics", get(metrics))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    let mut app = Router::new().route("/v1/health", get(health)).merge(protected);
    if let Some(dir) = &state.config.static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    } else {
        app = app.fallback(|| async { error(StatusCode::NOT_FOUND, "not found") });
    }
    let cors = cors_layer(&state.config.cors_origins);
    let app = app.with_state(state);
    match cors {
        Some(layer) => app.layer(layer),
        None => app,
    }
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: ApiState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
