//! HTTP chat service.
//!
//! ```text
//! GET  /health
//! POST /session                 -> {session_id}
//! POST /session/{id}/message    {text} -> {response_text, recommendations, subgraph}
//! GET  /session/{id}            -> Session
//! ```

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::engine::Engine;
use crate::harness::session::{replay, LogEvent, MessageResponse, Session, SessionLog};

type SessionCell = Arc<tokio::sync::Mutex<Session>>;

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Engine>,
    sessions: Arc<Mutex<HashMap<String, SessionCell>>>,
    log: Option<Arc<Mutex<SessionLog>>>,
}

impl AppState {
    /// Replays `log` (when given) and keeps appending to it.
    pub fn new(engine: Engine, log: Option<&Path>) -> Result<Self> {
        let (sessions, log) = match log {
            Some(path) => {
                let restored = replay(path)?;
                tracing::info!(sessions = restored.len(), path = %path.display(), "replayed session log");
                (restored, Some(Arc::new(Mutex::new(SessionLog::open(path)?))))
            }
            None => (HashMap::new(), None),
        };
        Ok(AppState {
            engine: Arc::new(engine),
            sessions: Arc::new(Mutex::new(
                sessions
                    .into_iter()
                    .map(|(k, v)| (k, Arc::new(tokio::sync::Mutex::new(v))))
                    .collect(),
            )),
            log,
        })
    }

    fn append(&self, event: &LogEvent) -> Result<()> {
        match &self.log {
            Some(log) => log.lock().expect("session log poisoned").append(event),
            None => Ok(()),
        }
    }

    fn session(&self, id: &str) -> Option<SessionCell> {
        self.sessions.lock().expect("session table poisoned").get(id).cloned()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MessageRequest {
    pub text: String,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidMessage(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn not_found(id: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("no session `{id}`"))
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create_session(State(state): State<AppState>) -> std::result::Result<Json<CreatedSession>, ApiError> {
    let id = uuid::Uuid::new_v4().to_string();
    state.append(&LogEvent::Created { session_id: id.clone() })?;
    state
        .sessions
        .lock()
        .expect("session table poisoned")
        .insert(id.clone(), Arc::new(tokio::sync::Mutex::new(Session::new(id.clone()))));
    Ok(Json(CreatedSession { session_id: id }))
}

async fn get_session(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> std::result::Result<Json<Session>, ApiError> {
    let cell = state.session(&id).ok_or_else(|| not_found(&id))?;
    let session = cell.lock().await.clone();
    Ok(Json(session))
}

async fn post_message(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<MessageRequest>,
) -> std::result::Result<Json<MessageResponse>, ApiError> {
    let cell = state.session(&id).ok_or_else(|| not_found(&id))?;
    // Held across inference so messages within one session are handled in order.
    let mut session = cell.lock().await;
    let context = session.context();
    let engine = state.engine.clone();
    let exchange = tokio::task::spawn_blocking(move || engine.respond(&context, &req.text))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    state.append(&LogEvent::Exchange {
        session_id: id,
        exchange: exchange.clone(),
    })?;
    session.apply(&exchange);
    Ok(Json(exchange.response))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/session", post(create_session))
        .route("/session/{id}", get(get_session))
        .route("/session/{id}/message", post(post_message))
        .with_state(state)
}

/// Binds `addr` and serves until the process stops.
pub async fn serve(state: AppState, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(format!("bind {addr}"), e))?;
    serve_on(state, listener).await
}

pub async fn serve_on(state: AppState, listener: tokio::net::TcpListener) -> Result<()> {
    let addr = listener.local_addr().map_err(|e| Error::io("listener", e))?;
    tracing::info!(%addr, "serving");
    axum::serve(listener, router(state))
        .await
        .map_err(|e| Error::io(format!("serve {addr}"), e))
}
