//! HTTP front end for live control sessions.

mod session;

pub use session::{ControlSession, CycleResult, PublicState, NOMINAL_START};

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use actwm_core::plantsim::CurveModel;
use actwm_core::worldmodel::WorldModel;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Checkpoint used when a session request names none.
    pub default_ckpt: Option<PathBuf>,
    /// Report the hidden disturbance in state and disturb responses.
    pub expose_disturbance: bool,
    pub plant: CurveModel,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            default_ckpt: None,
            expose_disturbance: false,
            plant: CurveModel::default(),
        }
    }
}

type Shared = Arc<Mutex<ControlSession>>;

pub struct AppState {
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Shared>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            config,
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    fn session(&self, id: &str) -> Result<Shared, ApiError> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no session {id}")))
    }
}

struct ApiError(StatusCode, String);

impl From<actwm_core::Error> for ApiError {
    fn from(e: actwm_core::Error) -> Self {
        ApiError(StatusCode::BAD_REQUEST, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Deserialize)]
struct CreateSession {
    ckpt: Option<PathBuf>,
    #[serde(default)]
    seed: u64,
}

#[derive(Serialize)]
struct Created {
    session_id: String,
}

#[derive(Deserialize)]
struct Adjust {
    delta: Vec<f64>,
}

#[derive(Deserialize)]
struct Disturb {
    offset: Vec<f64>,
}

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> ApiResult<Created> {
    let path = req.ckpt.or_else(|| app.config.default_ckpt.clone()).ok_or_else(|| {
        ApiError(StatusCode::BAD_REQUEST, "no checkpoint given and no default configured".into())
    })?;
    let plant = app.config.plant.clone();
    let session = tokio::task::spawn_blocking(move || {
        let model = WorldModel::load(&path)?;
        ControlSession::new(Arc::new(model), plant, req.seed)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let id = format!("s{}", app.next_id.fetch_add(1, Ordering::Relaxed));
    app.sessions
        .write()
        .expect("session map poisoned")
        .insert(id.clone(), Arc::new(Mutex::new(session)));
    log::info!("session {id} started with seed {}", req.seed);
    Ok(Json(Created { session_id: id }))
}

fn lock(s: &Shared) -> std::sync::MutexGuard<'_, ControlSession> {
    s.lock().expect("session poisoned")
}

async fn state(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Value> {
    let s = app.session(&id)?;
    let s = lock(&s);
    let mut v = serde_json::to_value(s.state()).expect("state serializes");
    if app.config.expose_disturbance {
        v["disturbance"] = json!(s.disturbance());
    }
    Ok(Json(v))
}

async fn cycle(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<CycleResult> {
    let s = app.session(&id)?;
    let r = tokio::task::spawn_blocking(move || lock(&s).step())
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(r))
}

async fn adjust(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<Adjust>,
) -> ApiResult<Value> {
    let s = app.session(&id)?;
    let nominal = lock(&s).adjust(&req.delta)?;
    Ok(Json(json!({ "nominal_params": nominal })))
}

async fn disturb(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<Disturb>,
) -> ApiResult<Value> {
    let s = app.session(&id)?;
    let mut s = lock(&s);
    s.disturb(&req.offset)?;
    if app.config.expose_disturbance {
        return Ok(Json(json!({ "disturbance": s.disturbance() })));
    }
    Ok(Json(json!({})))
}

async fn reset(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Value> {
    let s = app.session(&id)?;
    lock(&s).reset();
    Ok(Json(json!({})))
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/state", get(state))
        .route("/sessions/{id}/cycle", post(cycle))
        .route("/sessions/{id}/adjust", post(adjust))
        .route("/sessions/{id}/disturb", post(disturb))
        .route("/sessions/{id}/reset", post(reset))
        .with_state(app)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, config: ServiceConfig) -> std::io::Result<()> {
    axum::serve(listener, router(AppState::new(config))).await
}
