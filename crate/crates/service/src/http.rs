//! axum routes over [`Service`]. Bodies are parsed by hand so malformed
//! JSON yields the same `{error, detail}` shape as every other failure.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::store::Service;
use crate::wire::{AddConstraintRequest, CreateSessionRequest, ErrorBody};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = ErrorBody {
            error: self.code().into(),
            detail: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type Reply<T> = Result<Json<T>, ServiceError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::Unprocessable(format!("malformed request body: {e}")))
}

/// Runs blocking generator work off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Reply<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(ServiceError::internal)?
        .map(Json)
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
}

#[derive(Deserialize)]
struct PageQuery {
    #[serde(default)]
    offset: usize,
    #[serde(default = "default_limit")]
    limit: usize,
}

fn default_limit() -> usize {
    50
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(Health { status: "ok" }) }))
        .route("/checkpoints", get(|State(s): State<Arc<Service>>| async move { Json(s.checkpoints()) }))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/constraints", post(add_constraint))
        .route("/sessions/{id}/undo", post(undo))
        .route("/images", get(list_images))
        .route("/images/{id}", get(get_image))
        .fallback(|| async { ServiceError::NotFound("no such route".into()) })
        .with_state(service)
}

async fn create_session(State(s): State<Arc<Service>>, body: Bytes) -> Response {
    let req: CreateSessionRequest = match parse(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    match blocking(move || s.create_session(req)).await {
        Ok(state) => (StatusCode::CREATED, state).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn get_session(State(s): State<Arc<Service>>, Path(id): Path<String>) -> Reply<crate::wire::SessionState> {
    s.get_state(&id).map(Json)
}

async fn add_constraint(
    State(s): State<Arc<Service>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Reply<crate::wire::SessionState> {
    let req: AddConstraintRequest = parse(&body)?;
    blocking(move || s.add_constraint(&id, req.positive, req.negative)).await
}

async fn undo(State(s): State<Arc<Service>>, Path(id): Path<String>) -> Reply<crate::wire::SessionState> {
    blocking(move || s.undo(&id)).await
}

async fn list_images(
    State(s): State<Arc<Service>>,
    query: Result<Query<PageQuery>, axum::extract::rejection::QueryRejection>,
) -> Reply<crate::wire::ImagePage> {
    let Query(q) = query.map_err(|e| ServiceError::Unprocessable(e.body_text()))?;
    s.list_images(q.offset, q.limit).map(Json)
}

async fn get_image(State(s): State<Arc<Service>>, Path(id): Path<String>) -> Reply<crate::wire::ImageEntry> {
    let id: usize = id
        .parse()
        .map_err(|_| ServiceError::NotFound(format!("unknown image {id:?}")))?;
    s.get_image(id).map(Json)
}
