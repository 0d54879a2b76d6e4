// SPDX-License-Identifier: MIT OR Apache-2.0

//! HTTP service for interactive steered chat.
//!
//! | Method | Path | Body | Response |
//! |---|---|---|---|
//! | `GET` | `/health` | | `{model_loaded, model_id}` |
//! | `POST` | `/sessions` | | `201 {session_id, created_unix}` |
//! | `GET` | `/sessions/{id}` | | `{session_id, created_unix, transcript, plan}` |
//! | `PUT` | `/sessions/{id}/plan` | `[{trait, layers?, gamma}]` | `{session_id, plan}` |
//! | `POST` | `/sessions/{id}/messages` | `{text, max_new?}` | event stream |
//! | `GET` | `/traits` | | `[{trait, layers, norms, pair_count, created_unix}]` |
//!
//! The message stream carries one `data: {"t": piece, "i": index}` event per
//! generated token and ends with `data: {"done": true}`. A failure mid-stream
//! is reported as `data: {"error": message, "done": true}`. Errors outside the
//! stream are `{"error": message}` with status 404, 409, 422 or 503.
//!
//! The steering plan is read when a generation starts, so a plan update
//! during a stream takes effect from the next message. The response schema is
//! published in `schema/service-api.json`.

use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::mpsc;
use tokio_stream::wrappers::ReceiverStream;
use tokio_stream::StreamExt;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;
use uuid::Uuid;

use crate::chat::{generate_stream, render_prompt, Turn};
use crate::error::{Error, Result};
use crate::hub::Hub;
use crate::model::{DecodeStep, ModelHandle};
use crate::steering::{PlanEntrySummary, SteeringPlan};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Allowed CORS origins; empty allows any origin.
    pub cors_origins: Vec<String>,
    /// Directory served at `/` for paths not matched by the API.
    pub static_dir: Option<PathBuf>,
    /// Used when a message omits `max_new`.
    pub default_max_new: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            cors_origins: Vec::new(),
            static_dir: None,
            default_max_new: 64,
        }
    }
}

struct Session {
    created_unix: u64,
    transcript: Vec<Turn>,
    plan: SteeringPlan,
    busy: bool,
}

/// Shared server state: one immutable model, the hub and live sessions.
pub struct AppState {
    model: Option<Arc<ModelHandle>>,
    hub: Hub,
    config: ServiceConfig,
    sessions: Mutex<HashMap<Uuid, Arc<Mutex<Session>>>>,
}

impl AppState {
    pub fn new(model: Option<Arc<ModelHandle>>, hub: Hub, config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            model,
            hub,
            config,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    fn session(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        let id = Uuid::parse_str(id).ok()?;
        self.sessions.lock().expect("session map").get(&id).cloned()
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn not_found(id: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("unknown session `{id}`"))
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Plan entry as accepted by `PUT /sessions/{id}/plan`.
#[derive(Debug, Clone, Deserialize)]
pub struct PlanRequestEntry {
    #[serde(rename = "trait")]
    pub trait_name: String,
    #[serde(default)]
    pub layers: Vec<usize>,
    pub gamma: f32,
}

/// Plan entry echoed back with the norm of each applied layer vector.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedEntry {
    #[serde(flatten)]
    pub summary: PlanEntrySummary,
    pub norms: BTreeMap<usize, f32>,
}

fn describe_plan(plan: &SteeringPlan) -> Vec<ResolvedEntry> {
    plan.entries
        .iter()
        .zip(plan.summary())
        .map(|(e, summary)| {
            let all = e.control.norms();
            ResolvedEntry {
                summary,
                norms: e.layers.iter().map(|l| (*l, all[l])).collect(),
            }
        })
        .collect()
}

#[derive(Debug, Deserialize)]
pub struct MessageRequest {
    pub text: String,
    pub max_new: Option<usize>,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "model_loaded": state.model.is_some(),
        "model_id": state.model.as_ref().map(|m| m.model_id().to_hex()),
    }))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
) -> std::result::Result<Response, ApiError> {
    if state.model.is_none() {
        return Err(ApiError(
            StatusCode::SERVICE_UNAVAILABLE,
            "no model loaded".into(),
        ));
    }
    let id = Uuid::new_v4();
    let created_unix = now_unix();
    let session = Session {
        created_unix,
        transcript: Vec::new(),
        plan: SteeringPlan::vanilla(),
        busy: false,
    };
    state
        .sessions
        .lock()
        .expect("session map")
        .insert(id, Arc::new(Mutex::new(session)));
    Ok((
        StatusCode::CREATED,
        Json(json!({ "session_id": id.to_string(), "created_unix": created_unix })),
    )
        .into_response())
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> std::result::Result<Json<serde_json::Value>, ApiError> {
    let slot = state.session(&id).ok_or_else(|| not_found(&id))?;
    let s = slot.lock().expect("session");
    Ok(Json(json!({
        "session_id": id,
        "created_unix": s.created_unix,
        "transcript": s.transcript,
        "plan": describe_plan(&s.plan),
    })))
}

async fn put_plan(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<Vec<PlanRequestEntry>>,
) -> std::result::Result<Json<serde_json::Value>, ApiError> {
    let slot = state.session(&id).ok_or_else(|| not_found(&id))?;
    let model = state
        .model
        .clone()
        .ok_or_else(|| ApiError(StatusCode::SERVICE_UNAVAILABLE, "no model loaded".into()))?;
    let hub = state.hub.clone();
    let plan = tokio::task::spawn_blocking(move || resolve_plan(&hub, &model, &body))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let resolved = describe_plan(&plan);
    slot.lock().expect("session").plan = plan;
    Ok(Json(json!({ "session_id": id, "plan": resolved })))
}

/// Look up every requested trait for the loaded model and build a plan.
/// An entry without layers applies every layer stored for that trait.
pub fn resolve_plan(
    hub: &Hub,
    model: &ModelHandle,
    entries: &[PlanRequestEntry],
) -> Result<SteeringPlan> {
    let mut plan = SteeringPlan::vanilla();
    for e in entries {
        let control = hub
            .load(&e.trait_name, model.model_id())
            .map_err(|err| match err {
                Error::NotFound { .. } => Error::UnknownTrait(e.trait_name.clone()),
                other => other,
            })?;
        let layers = if e.layers.is_empty() {
            control.layers().into_iter().collect()
        } else {
            e.layers.clone()
        };
        plan = plan.with_entry(Arc::new(control), layers, e.gamma);
    }
    plan.validate(model)?;
    Ok(plan)
}

struct BusyGuard(Arc<Mutex<Session>>);

impl Drop for BusyGuard {
    fn drop(&mut self) {
        if let Ok(mut s) = self.0.lock() {
            s.busy = false;
        }
    }
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<MessageRequest>,
) -> std::result::Result<Response, ApiError> {
    let slot = state.session(&id).ok_or_else(|| not_found(&id))?;
    let model = state
        .model
        .clone()
        .ok_or_else(|| ApiError(StatusCode::SERVICE_UNAVAILABLE, "no model loaded".into()))?;
    let (prompt, plan) = {
        let mut s = slot.lock().expect("session");
        if s.busy {
            return Err(ApiError(
                StatusCode::CONFLICT,
                "a generation is already running for this session".into(),
            ));
        }
        s.busy = true;
        s.transcript.push(Turn::user(body.text));
        (render_prompt(&s.transcript), s.plan.clone())
    };
    let max_new = body.max_new.unwrap_or(state.config.default_max_new);
    let (tx, rx) = mpsc::channel::<Event>(64);
    let guard = BusyGuard(Arc::clone(&slot));
    tokio::task::spawn_blocking(move || {
        let result = generate_stream(&model, &plan, &prompt, max_new, |i, piece| {
            let ev = Event::default().data(json!({ "t": piece, "i": i }).to_string());
            match tx.blocking_send(ev) {
                Ok(()) => DecodeStep::Continue,
                Err(_) => DecodeStep::Stop,
            }
        });
        let last = match result {
            Ok(text) => {
                guard
                    .0
                    .lock()
                    .expect("session")
                    .transcript
                    .push(Turn::assistant(text));
                json!({ "done": true })
            }
            Err(e) => json!({ "error": e.to_string(), "done": true }),
        };
        drop(guard);
        let _ = tx.blocking_send(Event::default().data(last.to_string()));
    });
    let stream = ReceiverStream::new(rx).map(Ok::<_, Infallible>);
    Ok(Sse::new(stream).into_response())
}

#[derive(Debug, Serialize)]
struct TraitInfo {
    #[serde(rename = "trait")]
    trait_name: String,
    layers: Vec<usize>,
    norms: BTreeMap<usize, f32>,
    pair_count: u32,
    created_unix: u64,
}

async fn list_traits(
    State(state): State<Arc<AppState>>,
) -> std::result::Result<Json<serde_json::Value>, ApiError> {
    let Some(model) = state.model.clone() else {
        return Ok(Json(json!([])));
    };
    let hub = state.hub.clone();
    let vectors = tokio::task::spawn_blocking(move || hub.load_all_for(model.model_id()))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let list: Vec<_> = vectors
        .into_iter()
        .map(|v| TraitInfo {
            layers: v.layers().into_iter().collect(),
            norms: v.norms(),
            pair_count: v.meta.pair_count,
            created_unix: v.meta.created_unix,
            trait_name: v.trait_name,
        })
        .collect();
    Ok(Json(serde_json::to_value(list).expect("serializable")))
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = if state.config.cors_origins.is_empty() {
        CorsLayer::permissive()
    } else {
        let origins: Vec<HeaderValue> = state
            .config
            .cors_origins
            .iter()
            .filter_map(|o| HeaderValue::from_str(o).ok())
            .collect();
        CorsLayer::permissive().allow_origin(AllowOrigin::list(origins))
    };
    let mut app = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/plan", put(put_plan))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/traits", get(list_traits));
    if let Some(dir) = &state.config.static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    app.layer(cors).with_state(state)
}

/// Bind `addr` and serve until the process ends.
pub fn serve_blocking(
    addr: SocketAddr,
    state: Arc<AppState>,
    on_ready: impl FnOnce(SocketAddr),
) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Other(format!("runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::Other(format!("bind {addr}: {e}")))?;
        on_ready(listener.local_addr().unwrap_or(addr));
        axum::serve(listener, router(state))
            .await
            .map_err(|e| Error::Other(format!("server: {e}")))
    })
}
