//! HTTP front end for experiments stored in an [`ExperimentStore`].
//!
//! Every experiment sits behind its own mutex, so requests against one
//! experiment are serialised in log order while different experiments proceed
//! in parallel. Log writes happen on the blocking pool.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use ascend_core::config::ConfigError;
use ascend_core::experiment::ExperimentError;
use ascend_core::persistence::{ExperimentStore, FileLog, ReplayError};
use ascend_core::report::{Report, DEFAULT_TOP};
use ascend_core::simulator::slug;
use ascend_core::{ConversionOutcome, Experiment, ExperimentConfig, FieldError, Shortfall};

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_DATA_DIR: &str = "./data";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub port: u16,
    pub data_dir: PathBuf,
}

impl ServiceConfig {
    /// Reads `ASCEND_PORT` and `ASCEND_DATA_DIR`.
    pub fn from_env() -> Result<Self, String> {
        let port = match std::env::var("ASCEND_PORT") {
            Ok(v) => v
                .parse()
                .map_err(|_| format!("ASCEND_PORT: not a port number: {v:?}"))?,
            Err(_) => DEFAULT_PORT,
        };
        let data_dir = std::env::var_os("ASCEND_DATA_DIR")
            .map_or_else(|| DEFAULT_DATA_DIR.into(), PathBuf::from);
        Ok(Self { port, data_dir })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("invalid request")]
    Invalid(Vec<FieldError>),
    #[error("malformed body: {0}")]
    BadBody(String),
    #[error("experiment {0:?} not found")]
    NotFound(String),
    #[error("experiment {0:?} already exists")]
    Exists(String),
    #[error("experiment is {0}")]
    WrongStatus(&'static str),
    #[error("generation is not mature")]
    NotMature(Vec<Shortfall>),
    #[error("{0}")]
    Internal(String),
}

impl From<ExperimentError> for ApiError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Invalid(fields) => ApiError::Invalid(fields),
            ExperimentError::WrongStatus(s) => ApiError::WrongStatus(s.as_str()),
            ExperimentError::NotMature(short) => ApiError::NotMature(short),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<ReplayError> for ApiError {
    fn from(e: ReplayError) -> Self {
        ApiError::Internal(format!("recovery failed: {e}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let message = self.to_string();
        let (status, body) = match self {
            ApiError::Invalid(fields) => (
                StatusCode::BAD_REQUEST,
                json!({"error": "invalid_config", "message": message, "fields": fields}),
            ),
            ApiError::BadBody(_) => (
                StatusCode::BAD_REQUEST,
                json!({"error": "bad_request", "message": message}),
            ),
            ApiError::NotFound(_) => (
                StatusCode::NOT_FOUND,
                json!({"error": "not_found", "message": message}),
            ),
            ApiError::Exists(_) => (
                StatusCode::CONFLICT,
                json!({"error": "already_exists", "message": message}),
            ),
            ApiError::WrongStatus(_) => (
                StatusCode::CONFLICT,
                json!({"error": "wrong_status", "message": message}),
            ),
            ApiError::NotMature(short) => (
                StatusCode::CONFLICT,
                json!({"error": "not_mature", "message": message, "remaining": short}),
            ),
            ApiError::Internal(_) => (
                StatusCode::INTERNAL_SERVER_ERROR,
                json!({"error": "internal", "message": message}),
            ),
        };
        (status, Json(body)).into_response()
    }
}

struct Entry {
    experiment: Experiment<FileLog>,
    last_snapshot: u64,
}

type Shared = Arc<Mutex<Entry>>;

/// Shared handler state: the store plus the experiments opened so far.
#[derive(Clone)]
pub struct AppState {
    store: ExperimentStore,
    open: Arc<Mutex<HashMap<String, Shared>>>,
}

impl AppState {
    pub fn new(store: ExperimentStore) -> Self {
        Self {
            store,
            open: Arc::new(Mutex::new(HashMap::new())),
        }
    }

    pub fn store(&self) -> &ExperimentStore {
        &self.store
    }

    fn entry(&self, id: &str) -> Result<Shared, ApiError> {
        let mut open = self.open.lock().expect("registry lock");
        if let Some(entry) = open.get(id) {
            return Ok(entry.clone());
        }
        if !valid_id(id) || !self.store.exists(id) {
            return Err(ApiError::NotFound(id.to_string()));
        }
        let (experiment, recovery) = self.store.open(id)?;
        let entry = Arc::new(Mutex::new(Entry {
            experiment,
            last_snapshot: recovery.snapshot_sequence.unwrap_or(0),
        }));
        open.insert(id.to_string(), entry.clone());
        Ok(entry)
    }

    /// Runs `f` on the experiment's entry on the blocking pool, then snapshots if due.
    async fn with<T, F>(&self, id: String, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&mut Experiment<FileLog>) -> Result<T, ApiError> + Send + 'static,
    {
        let app = self.clone();
        tokio::task::spawn_blocking(move || {
            let shared = app.entry(&id)?;
            let mut entry = shared
                .lock()
                .map_err(|_| ApiError::Internal("experiment lock poisoned".into()))?;
            let out = f(&mut entry.experiment)?;
            let seq = entry.experiment.state().last_sequence;
            if seq >= entry.last_snapshot + app.store.snapshot_every() {
                app.store
                    .write_snapshot(entry.experiment.state())
                    .map_err(|e| ApiError::Internal(e.to_string()))?;
                entry.last_snapshot = seq;
            }
            Ok(out)
        })
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as i64)
}

fn idempotency_key(headers: &HeaderMap) -> Option<String> {
    headers
        .get("idempotency-key")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
}

fn parse<T: for<'de> Deserialize<'de>>(body: &str) -> Result<T, ApiError> {
    serde_json::from_str(body).map_err(|e| ApiError::BadBody(e.to_string()))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/experiments", get(list).post(create))
        .route("/experiments/{id}", get(summary))
        .route("/experiments/{id}/start", post(start))
        .route("/experiments/{id}/assign", post(assign))
        .route("/experiments/{id}/convert", post(convert))
        .route("/experiments/{id}/report", get(report))
        .route("/experiments/{id}/advance", post(advance))
        .route("/experiments/{id}/stop", post(stop))
        .with_state(state)
}

/// Binds and serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    std::fs::create_dir_all(&config.data_dir)?;
    let app = router(AppState::new(ExperimentStore::new(&config.data_dir)));
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!(
        "ascend: listening on {addr}, data in {}",
        config.data_dir.display()
    );
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub experiment_id: String,
    pub name: String,
    pub status: String,
    pub generation: u32,
    pub space_size: u128,
    pub total_interactions: u64,
    pub candidates: usize,
}

fn summarize(exp: &Experiment<FileLog>) -> ExperimentSummary {
    let s = exp.state();
    ExperimentSummary {
        experiment_id: s.experiment_id.clone(),
        name: s.config.name.clone(),
        status: s.status.as_str().into(),
        generation: s.generation,
        space_size: s.space.size(),
        total_interactions: s.total_impressions,
        candidates: s.candidates.len(),
    }
}

async fn list(State(app): State<AppState>) -> Result<Json<Vec<ExperimentSummary>>, ApiError> {
    let ids = app
        .store
        .list()
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        out.push(app.with(id, |exp| Ok(summarize(exp))).await?);
    }
    Ok(Json(out))
}

async fn summary(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<ExperimentSummary>, ApiError> {
    Ok(Json(app.with(id, |exp| Ok(summarize(exp))).await?))
}

async fn create(
    State(app): State<AppState>,
    body: String,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let config = ExperimentConfig::from_json(&body).map_err(|e| match e {
        ConfigError::Invalid(fields) => ApiError::Invalid(fields),
        ConfigError::Parse(e) => ApiError::BadBody(e.to_string()),
    })?;
    let id = config
        .experiment_id
        .clone()
        .unwrap_or_else(|| slug(&config.name));
    let store = app.store.clone();
    let registry = app.open.clone();
    tokio::task::spawn_blocking(move || {
        let mut open = registry.lock().expect("registry lock");
        if open.contains_key(&id) || store.exists(&id) {
            return Err(ApiError::Exists(id));
        }
        let experiment = store.create(&id, config, now_ms())?;
        let size = experiment.state().space.size();
        open.insert(
            id.clone(),
            Arc::new(Mutex::new(Entry {
                experiment,
                last_snapshot: 0,
            })),
        );
        Ok((
            StatusCode::CREATED,
            Json(json!({"experiment_id": id, "status": "draft", "space_size": size})),
        ))
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn start(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let body = app
        .with(id, |exp| {
            let size = exp.start(now_ms())?;
            Ok(json!({
                "experiment_id": exp.state().experiment_id,
                "status": exp.state().status.as_str(),
                "population_size": size,
            }))
        })
        .await?;
    Ok(Json(body))
}

#[derive(Debug, Deserialize)]
struct UserRequest {
    user_id: String,
    /// Milliseconds since the epoch; defaults to the server clock.
    timestamp: Option<i64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AssignResponse {
    pub candidate_id: u64,
    pub design: BTreeMap<String, String>,
    pub sticky_until: i64,
}

async fn assign(
    State(app): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: String,
) -> Result<Json<AssignResponse>, ApiError> {
    let req: UserRequest = parse(&body)?;
    if req.user_id.is_empty() {
        return Err(ApiError::Invalid(vec![FieldError::new(
            "user_id",
            "must not be empty",
        )]));
    }
    let key = idempotency_key(&headers);
    let out = app
        .with(id, move |exp| {
            let now = req.timestamp.unwrap_or_else(now_ms);
            let a = exp.assign_keyed(&req.user_id, now, key.as_deref())?;
            let design = exp
                .state()
                .design(a.candidate_id)
                .unwrap_or_default()
                .into_iter()
                .collect();
            Ok(AssignResponse {
                candidate_id: a.candidate_id,
                design,
                sticky_until: a.sticky_until,
            })
        })
        .await?;
    Ok(Json(out))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ConvertResponse {
    pub attributed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate_id: Option<u64>,
    /// The assignment had already converted; nothing new was counted.
    pub duplicate: bool,
}

async fn convert(
    State(app): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: String,
) -> Result<Json<ConvertResponse>, ApiError> {
    let req: UserRequest = parse(&body)?;
    let key = idempotency_key(&headers);
    let out = app
        .with(id, move |exp| {
            let now = req.timestamp.unwrap_or_else(now_ms);
            Ok(exp.record_conversion_keyed(&req.user_id, now, key.as_deref())?)
        })
        .await?;
    Ok(Json(ConvertResponse {
        attributed: out.attributed(),
        candidate_id: out.candidate_id(),
        duplicate: matches!(out, ConversionOutcome::Duplicate { .. }),
    }))
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    top: Option<usize>,
}

async fn report(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ReportQuery>,
) -> Result<impl IntoResponse, ApiError> {
    let top = q.top.unwrap_or(DEFAULT_TOP);
    let text = app
        .with(id, move |exp| {
            Ok(Report::build(exp.state(), top).to_json_pretty())
        })
        .await?;
    // Same bytes as `ascend report`.
    Ok(([(header::CONTENT_TYPE, "application/json")], text))
}

async fn advance(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let body = app
        .with(id, |exp| {
            let report = exp.advance(now_ms())?;
            let s = exp.state();
            Ok(json!({
                "status": s.status.as_str(),
                "generation": s.generation,
                "report": report,
            }))
        })
        .await?;
    Ok(Json(body))
}

async fn stop(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let body = app
        .with(id, |exp| {
            exp.stop(now_ms())?;
            Ok(json!({"experiment_id": exp.state().experiment_id, "status": exp.state().status.as_str()}))
        })
        .await?;
    Ok(Json(body))
}
