//! HTTP front end for review sessions.
//!
//! ```text
//! POST /sessions                 {run_id, reviewer_id, seed}   -> session
//! GET  /sessions                                               -> [session]
//! GET  /sessions/{id}/next                                     -> item | {"done": true}
//! POST /sessions/{id}/marks      {item_id, verdict, note?}     -> stats
//! GET  /sessions/{id}/stats                                    -> stats
//! ```
//!
//! Errors are JSON `{"error": kind, "message": text}` with 400, 404, 409 or
//! 422 status codes.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

use sqg_core::review::{ReviewError, ReviewStore, Verdict};

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub run_id: String,
    pub reviewer_id: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
pub struct SubmitMark {
    pub item_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Serialize)]
struct Done {
    done: bool,
}

#[derive(Debug)]
pub enum ApiError {
    Review(ReviewError),
    BadRequest(String),
    Internal(String),
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        ApiError::Review(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::BadRequest(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind, message) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, "bad_request", m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", m),
            ApiError::Review(e) => {
                let (status, kind) = match &e {
                    ReviewError::UnknownRun(_) => (StatusCode::NOT_FOUND, "unknown_run"),
                    ReviewError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
                    ReviewError::UnknownItem(_) => (StatusCode::NOT_FOUND, "unknown_item"),
                    ReviewError::AlreadyMarked(_) => (StatusCode::CONFLICT, "already_marked"),
                    ReviewError::EmptyRun(_) => (StatusCode::UNPROCESSABLE_ENTITY, "empty_run"),
                    _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
                };
                (status, kind, e.to_string())
            }
        };
        if status.is_server_error() {
            log::error!("{message}");
        }
        (status, Json(json!({ "error": kind, "message": message }))).into_response()
    }
}

type Shared = Arc<ReviewStore>;

/// Runs a store call off the async workers; mark appends sync to disk.
async fn blocking<T, F>(store: &Shared, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&ReviewStore) -> Result<T, ReviewError> + Send + 'static,
{
    let store = store.clone();
    tokio::task::spawn_blocking(move || f(&store))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(ApiError::from)
}

async fn create_session(
    State(store): State<Shared>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body?;
    if req.reviewer_id.trim().is_empty() {
        return Err(ApiError::BadRequest("reviewer_id must not be empty".into()));
    }
    let summary = blocking(&store, move |s| {
        s.create_session(&req.run_id, &req.reviewer_id, req.seed)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(summary)))
}

async fn list_sessions(State(store): State<Shared>) -> impl IntoResponse {
    Json(store.sessions())
}

async fn next_item(State(store): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(match store.next_item(&id)? {
        Some(item) => Json(item).into_response(),
        None => Json(Done { done: true }).into_response(),
    })
}

async fn submit_mark(
    State(store): State<Shared>,
    Path(id): Path<String>,
    body: Result<Json<SubmitMark>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body?;
    let stats = blocking(&store, move |s| s.submit_mark(&id, &req.item_id, req.verdict, req.note)).await?;
    Ok(Json(stats))
}

async fn session_stats(State(store): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(store.session_stats(&id)?))
}

pub fn router(store: Arc<ReviewStore>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}/next", get(next_item))
        .route("/sessions/{id}/marks", post(submit_mark))
        .route("/sessions/{id}/stats", get(session_stats))
        .layer(CorsLayer::permissive())
        .with_state(store)
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, store: Arc<ReviewStore>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
