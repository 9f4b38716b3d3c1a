//! JSON HTTP API over a shared [`Engine`].

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use errsight_core::management::Feedback;
use errsight_core::{Engine, Error, Trajectory};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize)]
pub struct ApiError {
    pub error: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(skip)]
    pub status: u16,
}

pub fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::Parse { .. }
        | Error::ParseLine { .. }
        | Error::SchemaViolation(_)
        | Error::InvalidInput(_)
        | Error::InvalidDiagnosis(_) => StatusCode::BAD_REQUEST,
        Error::NotFound(_) => StatusCode::NOT_FOUND,
        Error::DuplicateEntry(_) => StatusCode::CONFLICT,
        Error::UnparseableDiagnosis { .. } | Error::RecognitionFailed { .. } | Error::GenerationFailed { .. } => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        Error::BackendUnavailable { .. } | Error::ReplayMiss { .. } => StatusCode::BAD_GATEWAY,
        Error::ExpansionFailed(inner) => match inner.as_ref() {
            Error::BackendUnavailable { .. } | Error::ReplayMiss { .. } => StatusCode::BAD_GATEWAY,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        },
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError { error: e.kind().to_string(), message: e.to_string(), field: None, status: status_for(&e).as_u16() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

/// Parses a JSON body, reporting the offending field path on failure.
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ApiError {
            error: "InvalidInput".into(),
            message: e.inner().to_string(),
            field: (path != ".").then_some(path),
            status: 400,
        }
    })
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> errsight_core::Result<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::from(Error::Internal(e.to_string())))?
        .map_err(ApiError::from)
}

#[derive(Debug, Deserialize)]
pub struct RecognizeQuery {
    pub k: Option<usize>,
}

async fn recognize(
    State(engine): State<Arc<Engine>>,
    Query(q): Query<RecognizeQuery>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let t: Trajectory = parse_body(&body)?;
    t.check().map_err(ApiError::from)?;
    let k = q.k.unwrap_or(engine.config().k);
    if k == 0 {
        return Err(ApiError { error: "InvalidInput".into(), message: "k must be >= 1".into(), field: Some("k".into()), status: 400 });
    }
    let d = blocking(move || engine.recognize_detailed(&t, k).map(|r| r.diagnosis)).await?;
    Ok(Json(d).into_response())
}

async fn feedback(State(engine): State<Arc<Engine>>, body: Bytes) -> Result<Response, ApiError> {
    let fb: Feedback = parse_body(&body)?;
    if let Err(e) = fb.check() {
        return Err(ApiError { field: Some("ground_truth".into()), ..ApiError::from(e) });
    }
    let out = blocking(move || engine.feedback(fb)).await?;
    Ok(Json(out).into_response())
}

async fn schemas(State(engine): State<Arc<Engine>>) -> Response {
    Json(engine.schemas()).into_response()
}

async fn schema(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(engine.schema(&id)?).into_response())
}

async fn healthz(State(engine): State<Arc<Engine>>) -> Response {
    Json(engine.health()).into_response()
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/recognize", post(recognize))
        .route("/feedback", post(feedback))
        .route("/schemas", get(schemas))
        .route("/schemas/{id}", get(schema))
        .route("/healthz", get(healthz))
        .with_state(engine)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// Serves until SIGINT/SIGTERM, then persists the engine.
pub async fn serve(engine: Arc<Engine>, bind: &str) -> errsight_core::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| Error::Config(format!("cannot bind {bind}: {e}")))?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(engine.clone()))
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    tracing::info!("shutting down; persisting store");
    let e = engine.clone();
    tokio::task::spawn_blocking(move || e.persist())
        .await
        .map_err(|e| Error::Internal(e.to_string()))?
}
