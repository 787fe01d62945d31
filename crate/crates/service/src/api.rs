//! HTTP/JSON API and server-sent event streams.
//!
//! Every endpoint except `POST /api/login` takes the session token as
//! `Authorization: Bearer <token>` or a `token` query parameter (browsers
//! cannot set headers on `EventSource`). Errors are
//! `{"error": "<kind>", "message": "..."}`.

use crate::devices::StageRequest;
use crate::events::{Channel, Event};
use crate::jobs::RetrievalRequest;
use crate::scan::ScanRequest;
use crate::service::{AcquireRequest, Service, ServiceError, TubeRequest};
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event as SseEvent, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::HashMap;
use std::convert::Infallible;
use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

type Svc = Arc<Service>;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::Validation(_) | ServiceError::Address(_) => StatusCode::BAD_REQUEST,
            ServiceError::Auth => StatusCode::UNAUTHORIZED,
            ServiceError::Forbidden(_) => StatusCode::FORBIDDEN,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Busy(_) | ServiceError::Interlock(_) | ServiceError::ControlLocked { .. } => {
                StatusCode::CONFLICT
            }
            ServiceError::RateLimited(_) => StatusCode::TOO_MANY_REQUESTS,
            ServiceError::Device { .. } => StatusCode::BAD_GATEWAY,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({"error": self.kind(), "message": self.to_string()});
        if let ServiceError::Device { reply } = &self {
            body["reply"] = json!(reply);
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ServiceError>;

fn token(headers: &HeaderMap, query: &HashMap<String, String>) -> Option<String> {
    headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(|t| t.trim().to_string())
        .or_else(|| query.get("token").cloned())
}

fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ServiceError> {
    let bytes: &[u8] = if bytes.is_empty() { b"{}" } else { bytes };
    serde_json::from_slice(bytes).map_err(|e| ServiceError::Validation(format!("request body: {e}")))
}

/// Runs a (possibly blocking) service call off the async runtime.
async fn blocking<T, F>(f: F) -> ApiResult
where
    T: Serialize + Send + 'static,
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
{
    let v = tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Json(v).into_response())
}

#[derive(Deserialize)]
struct Credentials {
    user: String,
    password: String,
}

async fn login(State(svc): State<Svc>, b: Bytes) -> ApiResult {
    let c: Credentials = body(&b)?;
    blocking(move || svc.login(&c.user, &c.password)).await
}

/// Generates a handler that calls `Service::$method(token, args...)`.
macro_rules! with_token {
    ($svc:ident, $h:ident, $q:ident, |$t:ident| $call:expr) => {{
        let $t = token(&$h, &$q);
        blocking(move || {
            let $t = $t.as_deref();
            $call
        })
        .await
    }};
}

type Q = Query<HashMap<String, String>>;

async fn logout(State(svc): State<Svc>, h: HeaderMap, Query(q): Q) -> ApiResult {
    with_token!(svc, h, q, |t| svc.logout(t).map(|_| json!({"ok": true})))
}

async fn status(State(svc): State<Svc>, h: HeaderMap, Query(q): Q) -> ApiResult {
    with_token!(svc, h, q, |t| svc.status(t))
}

async fn stages(State(svc): State<Svc>, h: HeaderMap, Query(q): Q) -> ApiResult {
    with_token!(svc, h, q, |t| svc.stages(t))
}

async fn stage_command(State(svc): State<Svc>, h: HeaderMap, Query(q): Q, b: Bytes) -> ApiResult {
    let req: Result<StageRequest, _> = body(&b);
    with_token!(svc, h, q, |t| match req {
        Ok(req) => svc.stage_command(t, &req),
        Err(e) => svc.reject_malformed(t, "stage_command", e),
    })
}

async fn tube_get(State(svc): State<Svc>, h: HeaderMap, Query(q): Q) -> ApiResult {
    with_token!(svc, h, q, |t| svc.tube(t))
}

async fn tube_set(State(svc): State<Svc>, h: HeaderMap, Query(q): Q, b: Bytes) -> ApiResult {
    let req: Result<TubeRequest, _> = body(&b);
    with_token!(svc, h, q, |t| match req {
        Ok(req) => svc.set_tube(t, &req),
        Err(e) => svc.reject_malformed(t, "set_tube", e),
    })
}

async fn acquire(State(svc): State<Svc>, h: HeaderMap, Query(q): Q, b: Bytes) -> ApiResult {
    let req: Result<AcquireRequest, _> = body(&b);
    with_token!(svc, h, q, |t| match req {
        Ok(req) => svc.acquire(t, &req),
        Err(e) => svc.reject_malformed(t, "acquire", e),
    })
}

#[derive(Deserialize)]
struct LiveRequest {
    enabled: bool,
}

async fn live(State(svc): State<Svc>, h: HeaderMap, Query(q): Q, b: Bytes) -> ApiResult {
    let req: Result<LiveRequest, _> = body(&b);
    with_token!(svc, h, q, |t| match req {
        Ok(req) => svc.set_live(t, req.enabled).map(|on| json!({"live": on})),
        Err(e) => svc.reject_malformed(t, "set_live", e),
    })
}

async fn scan_start(State(svc): State<Svc>, h: HeaderMap, Query(q): Q, b: Bytes) -> ApiResult {
    let req: Result<ScanRequest, _> = body(&b);
    with_token!(svc, h, q, |t| match req {
        Ok(req) => svc.start_scan(t, &req),
        Err(e) => svc.reject_malformed(t, "scan_start", e),
    })
}

async fn scan_abort(State(svc): State<Svc>, h: HeaderMap, Query(q): Q) -> ApiResult {
    with_token!(svc, h, q, |t| svc.abort_scan(t))
}

async fn scan_status(State(svc): State<Svc>, h: HeaderMap, Query(q): Q) -> ApiResult {
    with_token!(svc, h, q, |t| svc.scan_status(t))
}

async fn retrieval(State(svc): State<Svc>, h: HeaderMap, Query(q): Q, b: Bytes) -> ApiResult {
    let req: Result<RetrievalRequest, _> = body(&b);
    with_token!(svc, h, q, |t| match req {
        Ok(req) => svc.start_retrieval(t, &req),
        Err(e) => svc.reject_malformed(t, "retrieval_job", e),
    })
}

async fn job(State(svc): State<Svc>, Path(id): Path<String>, h: HeaderMap, Query(q): Q) -> ApiResult {
    with_token!(svc, h, q, |t| svc.job(t, &id))
}

async fn job_preview(
    State(svc): State<Svc>,
    Path((id, channel)): Path<(String, String)>,
    h: HeaderMap,
    Query(q): Q,
) -> ApiResult {
    with_token!(svc, h, q, |t| svc.job_preview(t, &id, &channel))
}

async fn job_values(
    State(svc): State<Svc>,
    Path((id, channel)): Path<(String, String)>,
    h: HeaderMap,
    Query(q): Q,
) -> ApiResult {
    with_token!(svc, h, q, |t| svc
        .job_values(t, &id, &channel)
        .map(|(width, height, values)| json!({"width": width, "height": height, "values": values})))
}

async fn datasets(State(svc): State<Svc>, h: HeaderMap, Query(q): Q) -> ApiResult {
    with_token!(svc, h, q, |t| svc.datasets(t))
}

async fn history(State(svc): State<Svc>, h: HeaderMap, Query(q): Q) -> ApiResult {
    let limit = q.get("limit").and_then(|l| l.parse().ok()).unwrap_or(100);
    with_token!(svc, h, q, |t| svc.history(t, limit))
}

#[derive(Deserialize)]
struct Note {
    text: String,
}

async fn note(State(svc): State<Svc>, h: HeaderMap, Query(q): Q, b: Bytes) -> ApiResult {
    let req: Result<Note, _> = body(&b);
    with_token!(svc, h, q, |t| match req {
        Ok(n) => svc.add_note(t, &n.text).map(|_| json!({"ok": true})),
        Err(e) => svc.reject_malformed(t, "note", e),
    })
}

async fn maintenance(State(svc): State<Svc>, h: HeaderMap, Query(q): Q) -> ApiResult {
    with_token!(svc, h, q, |t| svc.maintenance(t))
}

async fn take_control(State(svc): State<Svc>, h: HeaderMap, Query(q): Q) -> ApiResult {
    with_token!(svc, h, q, |t| svc.take_control(t).map(|_| json!({"ok": true})))
}

async fn release_control(State(svc): State<Svc>, h: HeaderMap, Query(q): Q) -> ApiResult {
    with_token!(svc, h, q, |t| svc.release_control(t).map(|_| json!({"ok": true})))
}

fn sse_event(e: &Event) -> SseEvent {
    SseEvent::default()
        .id(e.seq.to_string())
        .event(e.kind.clone())
        .data(serde_json::to_string(&e.data).unwrap_or_default())
}

async fn events(
    State(svc): State<Svc>,
    Path(channel): Path<String>,
    h: HeaderMap,
    Query(q): Q,
) -> Result<Sse<impl Stream<Item = Result<SseEvent, Infallible>>>, ServiceError> {
    let channel: Channel = channel.parse().map_err(ServiceError::NotFound)?;
    let last_seen = q
        .get("last_seen")
        .cloned()
        .or_else(|| h.get("last-event-id").and_then(|v| v.to_str().ok()).map(String::from))
        .map(|s| s.parse::<u64>())
        .transpose()
        .map_err(|e| ServiceError::Validation(format!("last_seen: {e}")))?;
    let t = token(&h, &q);
    let sub = svc.subscribe(t.as_deref(), channel, last_seen)?;
    let heartbeat = Duration::from_millis(svc.config().events.heartbeat_ms.max(10));
    let first = sub
        .gap
        .then(|| SseEvent::default().event("gap").data(json!({"last_seen": last_seen}).to_string()));
    let stream = futures::stream::unfold((sub, first, false), move |(mut sub, pending, done)| async move {
        if let Some(ev) = pending {
            return Some((Ok(ev), (sub, None, done)));
        }
        if done {
            return None;
        }
        match tokio::time::timeout(heartbeat, sub.recv()).await {
            Ok(Some(e)) => Some((Ok(sse_event(&e)), (sub, None, false))),
            // The bus dropped this subscriber after its queue overflowed.
            Ok(None) => {
                let ev = SseEvent::default()
                    .event("overflow")
                    .data(json!({"reason": "consumer too slow; resume with last_seen"}).to_string());
                Some((Ok(ev), (sub, None, true)))
            }
            Err(_) => Some((Ok(SseEvent::default().event("heartbeat").data("{}")), (sub, None, false))),
        }
    });
    Ok(Sse::new(stream))
}

async fn health() -> impl IntoResponse {
    Json(json!({"ok": true}))
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/login", post(login))
        .route("/api/logout", post(logout))
        .route("/api/status", get(status))
        .route("/api/stages", get(stages))
        .route("/api/stages/command", post(stage_command))
        .route("/api/tube", get(tube_get).post(tube_set))
        .route("/api/detector/acquire", post(acquire))
        .route("/api/detector/live", post(live))
        .route("/api/scan/start", post(scan_start))
        .route("/api/scan/abort", post(scan_abort))
        .route("/api/scan/status", get(scan_status))
        .route("/api/jobs/retrieval", post(retrieval))
        .route("/api/jobs/{id}", get(job))
        .route("/api/jobs/{id}/preview/{channel}", get(job_preview))
        .route("/api/jobs/{id}/channel/{channel}", get(job_values))
        .route("/api/datasets", get(datasets))
        .route("/api/history", get(history))
        .route("/api/notes", post(note))
        .route("/api/maintenance", get(maintenance))
        .route("/api/control/take", post(take_control))
        .route("/api/control/release", post(release_control))
        .route("/api/events/{channel}", get(events))
        .with_state(svc)
}

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve(
    svc: Arc<Service>,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(svc)).with_graceful_shutdown(shutdown).await
}
