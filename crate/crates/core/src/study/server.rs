use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use super::{StudyError, StudyStore, Submission};

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    /// Review UI bundle served at `/`.
    pub static_dir: Option<PathBuf>,
    /// Bearer token unlocking `/api/study/report`. Without one the
    /// de-anonymized report is not served over HTTP.
    pub admin_token: Option<String>,
}

#[derive(Clone)]
struct AppState {
    store: Arc<StudyStore>,
    admin_token: Option<Arc<str>>,
}

fn error(status: StatusCode, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({"error": message.to_string()}))).into_response()
}

impl IntoResponse for StudyError {
    fn into_response(self) -> Response {
        let status = match self {
            StudyError::UnknownComparison(_) => StatusCode::NOT_FOUND,
            StudyError::InvalidDimension(_) | StudyError::InvalidChoice(_) | StudyError::InvalidAnnotator => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        error(status, self)
    }
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

async fn next(State(s): State<AppState>, Query(q): Query<NextQuery>) -> Response {
    let Some(annotator) = q.annotator else {
        return error(StatusCode::BAD_REQUEST, "missing annotator query parameter");
    };
    match s.store.next_case(&annotator) {
        Ok(payload) => Json(payload).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn preference(State(s): State<AppState>, body: Result<Json<Submission>, axum::extract::rejection::JsonRejection>) -> Response {
    let Json(submission) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let store = s.store.clone();
    match tokio::task::spawn_blocking(move || store.record(&submission)).await {
        Ok(Ok(r)) => Json(json!({
            "ok": true,
            "comparison_id": r.comparison_id,
            "dimension": r.dimension,
            "choice": r.choice,
        }))
        .into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn report(State(s): State<AppState>, headers: HeaderMap) -> Response {
    let Some(token) = &s.admin_token else {
        return error(StatusCode::FORBIDDEN, "report is not served without an admin token");
    };
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented != Some(&**token) {
        return error(StatusCode::UNAUTHORIZED, "admin token required");
    }
    Json(s.store.report()).into_response()
}

async fn export(State(s): State<AppState>) -> Response {
    match s.store.export() {
        Ok(bytes) => ([(header::CONTENT_TYPE, "application/x-ndjson")], bytes).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

pub fn router(store: Arc<StudyStore>, config: &ServerConfig) -> Router {
    let state = AppState {
        store,
        admin_token: config.admin_token.as_deref().map(Arc::from),
    };
    let api = Router::new()
        .route("/api/study/next", get(next))
        .route("/api/study/preference", post(preference))
        .route("/api/study/report", get(report))
        .route("/api/study/export", get(export))
        .route("/api/health", get(health))
        .with_state(state);
    match &config.static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Serve until `shutdown` resolves, then sync the preference log.
pub async fn serve(
    listener: tokio::net::TcpListener,
    store: Arc<StudyStore>,
    config: &ServerConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = router(store.clone(), config);
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
    store.sync().map_err(std::io::Error::other)
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
