//! HTTP/JSON and WebSocket front end for the notestream generator.
//!
//! | Method | Path | Body | Reply |
//! |---|---|---|---|
//! | GET | `/v1/health` | | [`Health`] |
//! | GET | `/v1/vocab` | | [`VocabSummary`] |
//! | POST | `/v1/generate` | [`GenerateRequest`] | [`GenerateResponse`] |
//! | POST | `/v1/profile` | [`ProfileRequest`] | [`ProfileResponse`] |
//! | GET | `/v1/stream` | | [`StreamStatus`] |
//! | POST | `/v1/stream/control` | [`ControlMessage`] | `ack` frame |
//! | GET | `/v1/stream/ws` | WebSocket upgrade | frames |
//!
//! Errors are [`ErrorBody`] JSON with a 4xx or 5xx status.

pub mod hub;
mod session;

pub use hub::{HubEvent, StreamConfig, StreamHub};

use axum::body::Bytes;
use axum::extract::{State, WebSocketUpgrade};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::serve::ListenerExt;
use axum::{Json, Router};
use notestream_core::profiler::{profile_run, ProfileConfig};
use notestream_core::streamer::StreamError;
use notestream_core::{generate_notes, Model, VocabSpec};
use notestream_protocol::{
    ControlMessage, ErrorBody, ErrorCode, GenerateRequest, GenerateResponse, Health, ModelSummary, ProfileRequest,
    ProfileResponse, ServerFrame, VocabSummary, PROTOCOL_VERSION,
};
use serde_json::Value;
use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

/// Largest `notes` accepted by `/v1/generate`.
pub const MAX_GENERATE_NOTES: u64 = 100_000;
/// Largest `generations` accepted by `/v1/profile`.
pub const MAX_PROFILE_GENERATIONS: usize = 10_000;
/// Kernel send buffer per connection. Left to autotuning, a stalled stream
/// client can soak up megabytes of stale notes before it counts as lagged.
const SEND_BUFFER_BYTES: usize = 64 * 1024;

#[derive(Clone)]
pub struct AppState {
    model: Arc<Model>,
    vocab: VocabSpec,
    hub: Option<Arc<StreamHub>>,
}

impl AppState {
    /// `stream` hosts a live stream; without it only the one-shot endpoints
    /// are served.
    pub fn new(model: Arc<Model>, vocab: VocabSpec, stream: Option<StreamConfig>) -> Result<Self, StreamError> {
        let hub = stream
            .map(|cfg| StreamHub::spawn(Arc::clone(&model), vocab, cfg))
            .transpose()?;
        Ok(AppState { model, vocab, hub })
    }

    pub fn hub(&self) -> Option<&Arc<StreamHub>> {
        self.hub.as_ref()
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, ErrorBody);

impl ApiError {
    fn bad_request(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, ErrorBody::new(code, message))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<ErrorBody> for ApiError {
    fn from(e: ErrorBody) -> Self {
        let status = match e.code {
            ErrorCode::NotFound | ErrorCode::NoStream => StatusCode::NOT_FOUND,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(status, e)
    }
}

fn stream_error(e: StreamError) -> ApiError {
    match e {
        StreamError::Decode(d) => ApiError::bad_request(ErrorCode::InvalidParams, d.to_string()),
        StreamError::Tokenizer(t) => ApiError::bad_request(ErrorCode::BadRequest, t.to_string()),
        other => ApiError(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody::new(ErrorCode::Internal, other.to_string())),
    }
}

/// Parse a JSON body ourselves so rejections come back as [`ErrorBody`].
fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(ErrorCode::BadRequest, e.to_string()))
}

fn hub(state: &AppState) -> Result<&Arc<StreamHub>, ApiError> {
    state.hub.as_ref().ok_or_else(|| {
        ApiError(
            StatusCode::NOT_FOUND,
            ErrorBody::new(ErrorCode::NoStream, "this server does not host a live stream"),
        )
    })
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    let c = state.model.config();
    Json(Health {
        v: PROTOCOL_VERSION,
        status: "ok".into(),
        model: ModelSummary {
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_model: c.d_model,
            context_len: c.context_len,
            vocab_size: c.vocab_size,
        },
        stream: state.hub.is_some(),
    })
}

async fn vocab(State(state): State<AppState>) -> Json<VocabSummary> {
    Json(state.vocab.into())
}

async fn generate(State(state): State<AppState>, body: Bytes) -> Result<Json<GenerateResponse>, ApiError> {
    let req: GenerateRequest = parse_body(&body)?;
    if req.notes > MAX_GENERATE_NOTES {
        return Err(ApiError::bad_request(
            ErrorCode::BadRequest,
            format!("notes must be at most {MAX_GENERATE_NOTES}"),
        ));
    }
    let (notes, summary) = tokio::task::spawn_blocking(move || {
        generate_notes(state.model, state.vocab, req.params, req.prompt.as_deref(), req.notes)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody::new(ErrorCode::Internal, e.to_string())))?
    .map_err(stream_error)?;
    Ok(Json(GenerateResponse {
        v: PROTOCOL_VERSION,
        notes,
        chunks: summary.chunks,
        tokens: summary.tokens,
        wall_s: summary.wall_s,
        tok_per_s: summary.tok_per_s,
    }))
}

async fn profile(State(state): State<AppState>, body: Bytes) -> Result<Json<ProfileResponse>, ApiError> {
    let req: ProfileRequest = parse_body(&body)?;
    if req.generations == 0 || req.generations > MAX_PROFILE_GENERATIONS {
        return Err(ApiError::bad_request(
            ErrorCode::BadRequest,
            format!("generations must be in 1..={MAX_PROFILE_GENERATIONS}"),
        ));
    }
    let cfg = ProfileConfig {
        n_generations: req.generations,
        buffers: req.buffers,
        rate_override: req.rate_override,
        per_generation: req.per_generation,
    };
    let out = tokio::task::spawn_blocking(move || profile_run(&state.model, &state.vocab, &req.params, &cfg))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody::new(ErrorCode::Internal, e.to_string())))?
        .map_err(|e| match e {
            notestream_core::profiler::ProfileError::Stream(s) => stream_error(s),
            other => ApiError::bad_request(ErrorCode::BadRequest, other.to_string()),
        })?;
    let mut report = out.report;
    report.label = req.label;
    Ok(Json(ProfileResponse {
        v: PROTOCOL_VERSION,
        report,
        density: out.density,
    }))
}

async fn stream_status(State(state): State<AppState>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(hub(&state)?.status()))
}

async fn stream_control(State(state): State<AppState>, body: Bytes) -> Result<Json<ServerFrame>, ApiError> {
    let hub = hub(&state)?;
    let value: Value = parse_body(&body)?;
    let msg = ControlMessage::from_value(value)?;
    let at = hub.control(msg).await?;
    Ok(Json(ServerFrame::ack(at)))
}

async fn stream_ws(State(state): State<AppState>, ws: WebSocketUpgrade) -> Result<Response, ApiError> {
    let hub = Arc::clone(hub(&state)?);
    Ok(ws.on_upgrade(move |socket| session::run(socket, hub)))
}

async fn not_found() -> ApiError {
    ApiError(StatusCode::NOT_FOUND, ErrorBody::new(ErrorCode::NotFound, "no such endpoint"))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/vocab", get(vocab))
        .route("/v1/generate", post(generate))
        .route("/v1/profile", post(profile))
        .route("/v1/stream", get(stream_status))
        .route("/v1/stream/control", post(stream_control))
        .route("/v1/stream/ws", get(stream_ws))
        .fallback(not_found)
        .with_state(state)
}

/// Serve until `shutdown` resolves, then close the stream and every session.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    let hub = state.hub.clone();
    let app = router(state);
    let listener = listener.tap_io(|tcp| {
        if let Err(e) = socket2::SockRef::from(&*tcp).set_send_buffer_size(SEND_BUFFER_BYTES) {
            tracing::debug!(error = %e, "could not size the send buffer");
        }
    });
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            shutdown.await;
            if let Some(h) = hub {
                h.shutdown();
            }
        })
        .await
}

/// A server running on the current tokio runtime.
pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<io::Result<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn shutdown(mut self) -> io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        self.task.await.map_err(io::Error::other)?
    }
}

/// Bind `addr` and serve in the background.
pub async fn spawn(addr: &str, state: AppState) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let (stop, stopped) = oneshot::channel::<()>();
    let task = tokio::spawn(serve(listener, state, async move {
        let _ = stopped.await;
    }));
    Ok(ServerHandle {
        addr,
        stop: Some(stop),
        task,
    })
}
