//! HTTP service for live task sessions.
//!
//! Grading and pressure decisions happen server-side; the client only renders
//! the question and the stimulus and reports the response time. Each session
//! appends its events to a JSON-lines journal when a journal directory is
//! configured.

pub mod session;

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tower_http::cors::{Any, CorsLayer};

use pressuresim::config::PipelineConfig;
use pressuresim::controller::Thresholds;
use pressuresim::data::{write_records, Group};

use session::{fnv1a, Session, SessionError};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub seed: u64,
    pub thresholds: Thresholds,
    pub journal_dir: Option<PathBuf>,
    /// Allowed CORS origin; any origin when unset.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            thresholds: Thresholds::default(),
            journal_dir: None,
            cors_origin: None,
        }
    }
}

impl ServiceConfig {
    /// Seed and controller thresholds from a pipeline config; journals go to
    /// `<outputs>/sessions`.
    pub fn from_pipeline(cfg: &PipelineConfig) -> Self {
        Self {
            seed: cfg.seeds.data,
            thresholds: cfg.controller,
            journal_dir: Some(cfg.paths.outputs.join("sessions")),
            cors_origin: None,
        }
    }
}

#[derive(Default)]
struct Registry {
    sessions: HashMap<String, Arc<Mutex<Session>>>,
    /// Participant id to their unfinished session.
    active: HashMap<String, String>,
}

pub struct AppState {
    cfg: ServiceConfig,
    registry: Mutex<Registry>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(cfg: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            cfg,
            registry: Mutex::new(Registry::default()),
            next_id: AtomicU64::new(1),
        })
    }

    async fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.registry
            .lock()
            .await
            .sessions
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id:?}")))
    }

    fn journal<T: Serialize>(&self, session_id: &str, event: &str, body: &T) {
        let Some(dir) = &self.cfg.journal_dir else {
            return;
        };
        let line = serde_json::json!({ "event": event, "session_id": session_id, "data": body });
        let write = || -> std::io::Result<()> {
            std::fs::create_dir_all(dir)?;
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(format!("{session_id}.jsonl")))?;
            writeln!(f, "{line}")
        };
        if let Err(e) = write() {
            tracing::error!(session_id, error = %e, "journal write failed");
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match e {
            SessionError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::CONFLICT,
        };
        Self::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub participant_id: String,
    pub group: String,
    pub n_trials: u32,
    /// Overrides the seed derived from the service seed and participant.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    pub seed: u64,
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let Json(req) = body?;
    let group: Group = req
        .group
        .parse()
        .map_err(|e: pressuresim::Error| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let mut reg = app.registry.lock().await;
    if let Some(id) = reg.active.get(&req.participant_id) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("participant already has active session {id}"),
        ));
    }
    let id = format!("s{:06}", app.next_id.fetch_add(1, Ordering::Relaxed));
    let seed = req.seed.unwrap_or(app.cfg.seed ^ fnv1a(&req.participant_id));
    let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let session = Session::new(
        id.clone(),
        req.participant_id.clone(),
        group,
        req.n_trials,
        seed,
        app.cfg.thresholds,
        created_at,
    )
    .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    reg.active.insert(req.participant_id.clone(), id.clone());
    reg.sessions.insert(id.clone(), Arc::new(Mutex::new(session)));
    drop(reg);
    app.journal(&id, "created", &serde_json::json!({ "request": req, "seed": seed, "created_at": created_at }));
    tracing::info!(session_id = %id, group = %group, "session created");
    Ok((StatusCode::CREATED, Json(Created { session_id: id, seed })))
}

async fn next_trial(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<session::TrialView>, ApiError> {
    let s = app.session(&id).await?;
    let mut s = s.lock().await;
    let view = s.next_trial()?;
    app.journal(&id, "trial", &view);
    Ok(Json(view))
}

async fn respond(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<session::Response>, JsonRejection>,
) -> Result<Json<session::Graded>, ApiError> {
    let s = app.session(&id).await?;
    let Json(req) = body?;
    let mut s = s.lock().await;
    let (graded, _) = s.respond(&req)?;
    app.journal(&id, "response", &req);
    if s.is_finished() {
        let participant = s.participant_id.clone();
        drop(s);
        let mut reg = app.registry.lock().await;
        if reg.active.get(&participant) == Some(&id) {
            reg.active.remove(&participant);
        }
    }
    Ok(Json(graded))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Status {
    pub session_id: String,
    pub participant_id: String,
    pub group: Group,
    pub n_trials: u32,
    pub completed: u32,
    pub finished: bool,
    pub pushes: u32,
    pub buffer_len: usize,
}

async fn status(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<Status>, ApiError> {
    let s = app.session(&id).await?;
    let s = s.lock().await;
    Ok(Json(Status {
        session_id: s.id.clone(),
        participant_id: s.participant_id.clone(),
        group: s.group,
        n_trials: s.n_trials,
        completed: s.cursor(),
        finished: s.is_finished(),
        pushes: s.controller().push_counter(),
        buffer_len: s.controller().buffer_len(),
    }))
}

async fn export(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let s = app.session(&id).await?;
    let s = s.lock().await;
    let mut buf = Vec::new();
    write_records(s.log(), &mut buf)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], buf).into_response())
}

async fn health() -> &'static str {
    "ok"
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    let cors = match state.cfg.cors_origin.as_deref().map(HeaderValue::from_str) {
        Some(Ok(origin)) => cors.allow_origin(origin),
        _ => cors.allow_origin(Any),
    };
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/:id", get(status))
        .route("/sessions/:id/trial", get(next_trial))
        .route("/sessions/:id/response", post(respond))
        .route("/sessions/:id/export", get(export))
        .layer(cors)
        .with_state(state)
}

/// Binds `0.0.0.0:port` and serves until the process stops.
pub async fn serve(cfg: ServiceConfig, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    tracing::info!(port, "listening");
    axum::serve(listener, router(AppState::new(cfg))).await
}

/// Config from `CONFIG_PATH` (a pipeline config file) if set, else defaults;
/// port from `PORT`, default 8080.
pub fn config_from_env() -> Result<(ServiceConfig, u16), String> {
    let cfg = match std::env::var_os("CONFIG_PATH") {
        Some(p) => {
            let pc = PipelineConfig::load(std::path::Path::new(&p)).map_err(|e| e.to_string())?;
            ServiceConfig::from_pipeline(&pc)
        }
        None => ServiceConfig::default(),
    };
    let port = match std::env::var("PORT") {
        Ok(p) => p.parse().map_err(|_| format!("PORT {p:?} is not a port number"))?,
        Err(_) => 8080,
    };
    let cors_origin = std::env::var("CORS_ORIGIN").ok();
    Ok((ServiceConfig { cors_origin, ..cfg }, port))
}
