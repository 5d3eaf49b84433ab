use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use scope_core::backends::{
    dispatch, validate_request, BackendError, BackendKind, Backends, Envelope, ErrorBody, PROTOCOL_VERSION,
};
use scope_core::session::{CommandEnvelope, ServerMessage};
use serde::Deserialize;
use serde_json::{json, Value};
use tracing::{debug, warn};

use crate::hub::Initial;
use crate::live::{LiveError, LiveSession};

/// What the service exposes: model backends, a live session, or both.
#[derive(Clone, Default)]
pub struct AppState {
    pub backends: Option<Backends>,
    pub live: Option<Arc<LiveSession>>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/{kind}", post(backend))
        .route("/v1/session/events", get(events))
        .route("/v1/session/command", post(command))
        .route("/v1/session/snapshot", get(snapshot))
        .route("/v1/session/advance", post(advance))
        .with_state(state)
}

fn error(status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    let body = ErrorBody {
        code: code.into(),
        message: message.into(),
        retryable: status.is_server_error(),
    };
    (status, Json(body)).into_response()
}

fn backend_status(e: &BackendError) -> StatusCode {
    match e {
        BackendError::Timeout { .. } => StatusCode::GATEWAY_TIMEOUT,
        BackendError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        BackendError::Rejected(_) => StatusCode::UNPROCESSABLE_ENTITY,
        BackendError::Protocol(_) => StatusCode::BAD_REQUEST,
    }
}

async fn healthz(State(st): State<AppState>) -> Json<Value> {
    let kinds: Vec<&str> = match st.backends {
        Some(_) => BackendKind::ALL.iter().map(|k| k.as_str()).collect(),
        None => Vec::new(),
    };
    Json(json!({
        "status": "ok",
        "version": PROTOCOL_VERSION,
        "kinds": kinds,
        "session": st.live.is_some(),
    }))
}

async fn backend(State(st): State<AppState>, Path(kind): Path<String>, body: Bytes) -> Response {
    let Ok(kind) = kind.parse::<BackendKind>() else {
        return error(StatusCode::NOT_FOUND, "unknown_kind", format!("no backend kind {kind:?}"));
    };
    let Some(backends) = st.backends else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "unavailable", "this server hosts no model backends");
    };
    let env: Envelope<Value> = match serde_json::from_slice(&body) {
        Ok(e) => e,
        Err(e) => return error(StatusCode::BAD_REQUEST, "bad_request", format!("envelope: {e}")),
    };
    if env.kind != kind {
        return error(StatusCode::BAD_REQUEST, "bad_request", format!("envelope kind {} posted to /v1/{kind}", env.kind));
    }
    if env.version != PROTOCOL_VERSION {
        return error(StatusCode::BAD_REQUEST, "version", format!("unsupported protocol version {:?}", env.version));
    }
    if let Err(e) = validate_request(kind, &env.payload) {
        return (backend_status(&e), Json(e.to_body())).into_response();
    }
    let result = tokio::task::spawn_blocking(move || dispatch(&backends, kind, env.payload)).await;
    match result {
        Ok(Ok(payload)) => Json(Envelope::new(kind, payload)).into_response(),
        Ok(Err(e)) => {
            debug!(%kind, error = %e, "backend error");
            (backend_status(&e), Json(e.to_body())).into_response()
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

fn live(st: &AppState) -> Result<Arc<LiveSession>, Response> {
    st.live
        .clone()
        .ok_or_else(|| error(StatusCode::NOT_FOUND, "no_session", "this server runs no session"))
}

fn live_error(e: LiveError) -> Response {
    let status = match e {
        LiveError::Finished | LiveError::NotManual => StatusCode::CONFLICT,
        LiveError::Stopped => StatusCode::SERVICE_UNAVAILABLE,
    };
    error(status, "session", e.to_string())
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    since: Option<u64>,
}

async fn events(ws: WebSocketUpgrade, Query(q): Query<EventsQuery>, State(st): State<AppState>) -> Response {
    match live(&st) {
        Ok(live) => ws.on_upgrade(move |socket| stream(socket, live, q.since)),
        Err(r) => r,
    }
}

async fn send(socket: &mut WebSocket, msg: &ServerMessage) -> bool {
    let text = serde_json::to_string(msg).expect("server message serializes");
    socket.send(Message::Text(text.into())).await.is_ok()
}

fn ack(live: &LiveSession, text: &str) -> ServerMessage {
    let env: CommandEnvelope = match serde_json::from_str(text) {
        Ok(e) => e,
        Err(e) => return ServerMessage::Error { message: format!("bad command: {e}") },
    };
    let id = env.id.clone();
    match live.submit(env) {
        Ok(duplicate) => ServerMessage::Ack { id, duplicate },
        Err(e) => ServerMessage::Error { message: e.to_string() },
    }
}

async fn stream(mut socket: WebSocket, live: Arc<LiveSession>, since: Option<u64>) {
    let sub = live.hub().subscribe(since);
    let ok = match &sub.initial {
        Initial::Snapshot(s) => send(&mut socket, &ServerMessage::Snapshot { snapshot: s.clone() }).await,
        Initial::Resume(events) => {
            let mut ok = true;
            for e in events {
                ok = ok && send(&mut socket, &ServerMessage::Event { event: e.clone() }).await;
            }
            ok
        }
    };
    if !ok {
        return;
    }
    let mut ended = false;
    loop {
        tokio::select! {
            batch = sub.next_batch(), if !ended => {
                if let Some((count, total)) = batch.dropped {
                    if !send(&mut socket, &ServerMessage::Dropped { count, total }).await {
                        return;
                    }
                }
                for event in batch.events {
                    if !send(&mut socket, &ServerMessage::Event { event }).await {
                        return;
                    }
                }
                ended = batch.closed;
            }
            msg = socket.recv() => match msg {
                Some(Ok(Message::Text(text))) => {
                    let reply = ack(&live, text.as_str());
                    if !send(&mut socket, &reply).await {
                        return;
                    }
                }
                Some(Ok(Message::Close(_))) | None => return,
                Some(Err(e)) => {
                    warn!(error = %e, "event socket error");
                    return;
                }
                Some(Ok(_)) => {}
            }
        }
    }
}

async fn command(State(st): State<AppState>, Json(env): Json<CommandEnvelope>) -> Response {
    let live = match live(&st) {
        Ok(l) => l,
        Err(r) => return r,
    };
    let id = env.id.clone();
    match live.submit(env) {
        Ok(duplicate) => (StatusCode::ACCEPTED, Json(ServerMessage::Ack { id, duplicate })).into_response(),
        Err(e) => live_error(e),
    }
}

async fn snapshot(State(st): State<AppState>) -> Response {
    match live(&st) {
        Ok(l) => Json(l.hub().snapshot()).into_response(),
        Err(r) => r,
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdvanceRequest {
    frames: usize,
}

async fn advance(State(st): State<AppState>, Json(req): Json<AdvanceRequest>) -> Response {
    let live = match live(&st) {
        Ok(l) => l,
        Err(r) => return r,
    };
    match live.advance(req.frames).await {
        Ok(report) => Json(report).into_response(),
        Err(e) => live_error(e),
    }
}
