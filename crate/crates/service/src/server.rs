//! HTTP API for live rating.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bridgelab::feedback::Side;
use bridgelab::imageio::png_gray_bytes;
use serde::Deserialize;

use crate::error::ServiceError;
use crate::hub::Hub;
use crate::store::CandidateStore;

#[derive(Clone)]
pub struct AppState {
    /// All pool mutations and log appends go through this lock.
    pub hub: Arc<Mutex<Hub>>,
    pub store: Arc<CandidateStore>,
}

impl AppState {
    pub fn new(hub: Hub) -> Self {
        let store = hub.store().clone();
        Self {
            hub: Arc::new(Mutex::new(hub)),
            store,
        }
    }
}

#[derive(Debug, Deserialize)]
struct ChoiceBody {
    matchup_id: String,
    winner: Side,
    rater: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/next", get(next))
        .route("/api/choice", post(choice))
        .route("/api/status", get(status))
        .route("/img/{file}", get(image))
        .with_state(state)
}

fn lock(state: &AppState) -> std::sync::MutexGuard<'_, Hub> {
    state.hub.lock().unwrap_or_else(|e| e.into_inner())
}

async fn next(State(state): State<AppState>, Query(q): Query<HashMap<String, String>>) -> Response {
    let rater = match q.get("rater").map(|r| r.trim()) {
        Some(r) if !r.is_empty() => r.to_string(),
        _ => return ServiceError::BadRequest("missing rater".into()).into_response(),
    };
    match lock(&state).next(&rater) {
        Some(view) => Json(view).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn choice(State(state): State<AppState>, body: Bytes) -> Response {
    let body: ChoiceBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return ServiceError::BadRequest(e.to_string()).into_response(),
    };
    if body.rater.trim().is_empty() {
        return ServiceError::BadRequest("missing rater".into()).into_response();
    }
    match lock(&state).choose(&body.matchup_id, body.winner, &body.rater) {
        Ok(outcome) => Json(outcome).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn status(State(state): State<AppState>) -> Response {
    Json(lock(&state).status()).into_response()
}

async fn image(State(state): State<AppState>, Path(file): Path<String>) -> Response {
    let Some(id) = file.strip_suffix(".png") else {
        return ServiceError::NotFound(file).into_response();
    };
    let path = match state.store.image_path(id) {
        Ok(p) => p,
        Err(ServiceError::BadRequest(_)) => return ServiceError::NotFound(file).into_response(),
        Err(e) => return e.into_response(),
    };
    let rendered = tokio::task::spawn_blocking(move || -> Result<Vec<u8>, ServiceError> {
        let img = bridgelab::imageio::load_sbim(&path)?;
        Ok(png_gray_bytes(&img)?)
    })
    .await;
    match rendered {
        Ok(Ok(bytes)) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

/// Binds and serves until ctrl-c.
pub async fn serve(state: AppState, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
