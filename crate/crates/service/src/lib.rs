//! HTTP/JSON service for running sessions from a browser console.
//!
//! All session mutations run on the blocking pool, since a real rig moves and
//! vibrates in wall-clock time.

pub mod api;
pub mod config;
mod state;

use std::convert::Infallible;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};

pub use api::*;
pub use config::{Backend, ConfigError, FileConfig, ServiceConfig};
pub use state::{now_stamp, open_apparatus, AppState};

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

pub fn router(state: AppState) -> Router {
    let sessions = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/response", post(submit_response))
        .route("/sessions/{id}/live", get(live))
        .route("/sessions/{id}/advance", post(advance))
        .route("/sessions/{id}/abort", post(abort))
        .route("/sessions/{id}/record", get(record))
        .route("/sessions/{id}/events", get(events))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new().route("/health", get(health)).merge(sessions).fallback(not_found).with_state(state)
}

async fn require_token(State(state): State<AppState>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(token) = &state.config().token {
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError::unauthorized().into_response();
        }
    }
    next.run(req).await
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NOT_FOUND", "no such route")
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        schema_version: API_SCHEMA_VERSION,
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        apparatus: state.config().apparatus.to_string(),
        live_sessions: state.live_count(),
    })
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<Transition>), ApiError> {
    let t = blocking(move || state.create_session(&body)).await?;
    Ok((StatusCode::CREATED, Json(t)))
}

async fn list_sessions(
    State(state): State<AppState>,
    query: Result<Query<ListQuery>, QueryRejection>,
) -> Result<Json<SessionList>, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::validation(e.body_text()))?;
    Ok(Json(blocking(move || state.list(&q)).await?))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionHandle>, ApiError> {
    Ok(Json(blocking(move || state.handle(&id)).await?))
}

async fn submit_response(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<ResponseResult>, ApiError> {
    Ok(Json(blocking(move || state.submit_response(&id, &body)).await?))
}

async fn live(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<LiveState>, ApiError> {
    Ok(Json(blocking(move || state.live_state(&id)).await?))
}

async fn advance(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Transition>, ApiError> {
    Ok(Json(blocking(move || state.advance(&id)).await?))
}

async fn abort(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionHandle>, ApiError> {
    Ok(Json(blocking(move || state.abort(&id)).await?))
}

async fn record(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let bytes = blocking(move || state.record_bytes(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

/// Server-sent events carrying the same document as `/live`: one on connect,
/// then one per transition.
async fn events(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let (first, rx) = blocking(move || state.live_json(&id)).await?;
    let first = stream::once(async move { Ok(Event::default().event("live").data(first)) });
    let rest = match rx {
        Some(rx) => stream::unfold(Some(rx), |rx| async move {
            let mut rx = rx?;
            loop {
                match rx.recv().await {
                    Ok(ev) => {
                        let next = (!ev.terminal).then_some(rx);
                        return Some((Ok(Event::default().event("live").data(&*ev.doc)), next));
                    }
                    Err(tokio::sync::broadcast::error::RecvError::Lagged(_)) => continue,
                    Err(tokio::sync::broadcast::error::RecvError::Closed) => return None,
                }
            }
        })
        .boxed(),
        None => stream::empty().boxed(),
    };
    Ok(Sse::new(first.chain(rest)).keep_alive(KeepAlive::default()))
}

/// Binds and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let bind = config.bind.clone();
    let state = tokio::task::spawn_blocking(move || AppState::new(config))
        .await
        .map_err(std::io::Error::other)?
        .map_err(|e| std::io::Error::other(e.message))?;
    let listener = tokio::net::TcpListener::bind(&bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "vibropsi service listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
