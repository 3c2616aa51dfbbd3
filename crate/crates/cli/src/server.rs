//! HTTP/JSON API over engine sessions.
//!
//! Turns of one session run one at a time behind that session's mutex; different
//! sessions proceed concurrently on the blocking pool.

use std::collections::HashMap;
use std::sync::Arc;

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::sync::{Mutex, RwLock};
use tower_http::cors::CorsLayer;

use medreason::service::{SessionEvent, SessionStore};
use medreason::{Engine, Session, Stage};

use crate::ServeArgs;

pub struct AppState {
    engine: Arc<Engine>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    store: Option<SessionStore>,
}

impl AppState {
    pub fn new(engine: Engine, store: Option<SessionStore>) -> Result<Self> {
        let mut sessions = HashMap::new();
        if let Some(s) = &store {
            for id in s.list()? {
                let session = s.load(&id).with_context(|| format!("restoring session {id}"))?;
                sessions.insert(id, Arc::new(Mutex::new(session)));
            }
        }
        Ok(Self { engine: Arc::new(engine), sessions: RwLock::new(sessions), store })
    }

    async fn session(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        self.sessions.read().await.get(id).cloned()
    }
}

fn error(status: StatusCode, body: Value) -> Response {
    (status, Json(body)).into_response()
}

fn not_found(id: &str) -> Response {
    error(StatusCode::NOT_FOUND, json!({ "error": format!("unknown session '{id}'") }))
}

fn internal(e: impl std::fmt::Display) -> Response {
    error(StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": e.to_string() }))
}

async fn healthz() -> &'static str {
    "ok"
}

async fn create_session(State(state): State<Arc<AppState>>) -> Response {
    let id = uuid::Uuid::new_v4().to_string();
    let session = state.engine.new_session(id.clone());
    if let Some(store) = &state.store {
        if let Err(e) = store.create(&session) {
            return internal(e);
        }
    }
    state.sessions.write().await.insert(id.clone(), Arc::new(Mutex::new(session)));
    (StatusCode::CREATED, Json(json!({ "id": id }))).into_response()
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    match state.session(&id).await {
        Some(s) => Json(s.lock().await.clone()).into_response(),
        None => not_found(&id),
    }
}

async fn get_trace(State(state): State<Arc<AppState>>, Path((id, turn)): Path<(String, usize)>) -> Response {
    let Some(s) = state.session(&id).await else {
        return not_found(&id);
    };
    let session = s.lock().await;
    match session.trace(turn) {
        Some(t) => Json(t).into_response(),
        None => error(StatusCode::NOT_FOUND, json!({ "error": format!("session '{id}' has no turn {turn}") })),
    }
}

/// Extracts `text` from a message body, or the 400 response describing what is wrong.
fn parse_message(body: &[u8]) -> Result<String, Box<Response>> {
    let bad = |fields: Value| {
        Box::new(error(StatusCode::BAD_REQUEST, json!({ "error": "invalid request", "fields": fields })))
    };
    let value: Value = serde_json::from_slice(body).map_err(|e| {
        Box::new(error(StatusCode::BAD_REQUEST, json!({ "error": "body is not valid JSON", "detail": e.to_string() })))
    })?;
    let Some(obj) = value.as_object() else {
        return Err(bad(json!({ "text": "body must be an object with a string field" })));
    };
    match obj.get("text") {
        None => Err(bad(json!({ "text": "required" }))),
        Some(Value::String(s)) if s.trim().is_empty() => Err(bad(json!({ "text": "must not be empty" }))),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(bad(json!({ "text": "must be a string" }))),
    }
}

async fn post_message(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Response {
    let Some(s) = state.session(&id).await else {
        return not_found(&id);
    };
    let text = match parse_message(&body) {
        Ok(t) => t,
        Err(r) => return *r,
    };
    let mut guard = s.lock_owned().await;
    let worker = state.clone();
    let joined = tokio::task::spawn_blocking(move || {
        let result = worker.engine.step(&mut guard, &text);
        let event = match &result {
            Ok(trace) => SessionEvent::Turn { trace: Box::new(trace.clone()) },
            Err(_) => SessionEvent::Failed { failure: guard.failures.last().cloned().expect("failure recorded") },
        };
        let persisted = worker.store.as_ref().map_or(Ok(()), |st| st.record(&guard, &event));
        (result, persisted)
    })
    .await;
    let (result, persisted) = match joined {
        Ok(r) => r,
        Err(e) => return internal(e),
    };
    if let Err(e) = persisted {
        tracing::error!(session = %id, error = %e, "could not persist session event");
    }
    match result {
        Ok(trace) => Json(trace).into_response(),
        Err(e) => {
            let status = if Stage::LLM_BACKED.contains(&e.stage) {
                StatusCode::BAD_GATEWAY
            } else {
                StatusCode::INTERNAL_SERVER_ERROR
            };
            error(status, json!({ "error": e.message, "stage": e.stage, "turn": e.turn }))
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/message", post(post_message))
        .route("/sessions/{id}/trace/{turn}", get(get_trace))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let engine = crate::commands::build_engine(&a.engine)?;
    let store = a.store.as_ref().map(|d| SessionStore::open(d, a.snapshot_every)).transpose()?;
    let state = Arc::new(AppState::new(engine, store)?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr).await.with_context(|| format!("binding {}", a.addr))?;
        eprintln!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
