//! JSON wire types for the stream WebSocket and the HTTP API.
//!
//! Every WebSocket frame is a JSON text frame carrying `"v": 1` and a `"type"`
//! tag. The server speaks [`ServerFrame`]; clients send [`ControlMessage`].

use notestream_core::profiler::{DensityProfile, ProfileReport};
use notestream_core::tokenizer::{DRUM_INSTRUMENT, MAX_SEQ_NOTES};
use notestream_core::{GenParams, NoteEvent, ParamsUpdate, VocabSpec};
use serde::{Deserialize, Serialize};
use std::fmt;

pub const PROTOCOL_VERSION: u32 = 1;

fn v1() -> u32 {
    PROTOCOL_VERSION
}

/// Vocabulary layout as advertised to clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VocabSummary {
    #[serde(flatten)]
    pub spec: VocabSpec,
    pub vocab_size: usize,
    pub drum_instrument: u16,
    pub max_seq_notes: usize,
}

impl From<VocabSpec> for VocabSummary {
    fn from(spec: VocabSpec) -> Self {
        VocabSummary {
            spec,
            vocab_size: spec.vocab_size(),
            drum_instrument: DRUM_INSTRUMENT,
            max_seq_notes: MAX_SEQ_NOTES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Not JSON, or JSON of the wrong shape.
    BadFrame,
    UnsupportedVersion,
    UnknownKind,
    /// A parameter update that would leave the parameters invalid.
    InvalidParams,
    BadRequest,
    NotFound,
    /// No live stream is hosted by this server.
    NoStream,
    Internal,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("internal"))
    }
}

/// Frames sent by the server over the stream WebSocket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    /// Always the first frame on a connection.
    Hello {
        v: u32,
        vocab: VocabSummary,
        params: GenParams,
        buffer_s: f64,
    },
    /// Start of chunk `index`; its `notes` note frames follow.
    Chunk { v: u32, index: u64, notes: usize },
    Note {
        v: u32,
        #[serde(flatten)]
        note: NoteEvent,
    },
    /// A control message was accepted and takes effect from chunk
    /// `applied_at_chunk` on.
    Ack { v: u32, applied_at_chunk: u64 },
    Error {
        v: u32,
        code: ErrorCode,
        message: String,
    },
}

impl ServerFrame {
    pub fn hello(vocab: VocabSpec, params: GenParams, buffer_s: f64) -> Self {
        ServerFrame::Hello {
            v: PROTOCOL_VERSION,
            vocab: vocab.into(),
            params,
            buffer_s,
        }
    }

    pub fn chunk(index: u64, notes: usize) -> Self {
        ServerFrame::Chunk {
            v: PROTOCOL_VERSION,
            index,
            notes,
        }
    }

    pub fn note(note: NoteEvent) -> Self {
        ServerFrame::Note {
            v: PROTOCOL_VERSION,
            note,
        }
    }

    pub fn ack(applied_at_chunk: u64) -> Self {
        ServerFrame::Ack {
            v: PROTOCOL_VERSION,
            applied_at_chunk,
        }
    }

    pub fn error(e: ErrorBody) -> Self {
        ServerFrame::Error {
            v: PROTOCOL_VERSION,
            code: e.code,
            message: e.message,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frames always serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Start,
    Stop,
    SetParams,
}

/// Client to server control frame. `params` is only read for `set_params`
/// and may name any subset of the adjustable parameters; `"ensemble": null`
/// clears the ensemble restriction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlMessage {
    #[serde(default = "v1")]
    pub v: u32,
    pub kind: ControlKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamsUpdate>,
}

impl ControlMessage {
    pub fn start() -> Self {
        ControlMessage {
            v: PROTOCOL_VERSION,
            kind: ControlKind::Start,
            params: None,
        }
    }

    pub fn stop() -> Self {
        ControlMessage {
            v: PROTOCOL_VERSION,
            kind: ControlKind::Stop,
            params: None,
        }
    }

    pub fn set_params(update: ParamsUpdate) -> Self {
        ControlMessage {
            v: PROTOCOL_VERSION,
            kind: ControlKind::SetParams,
            params: Some(update),
        }
    }

    /// Parse a control frame, telling unknown kinds and versions apart from
    /// malformed input.
    pub fn parse(text: &str) -> Result<Self, ErrorBody> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| ErrorBody::new(ErrorCode::BadFrame, format!("invalid JSON: {e}")))?;
        Self::from_value(value)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, ErrorBody> {
        let obj = value
            .as_object()
            .ok_or_else(|| ErrorBody::new(ErrorCode::BadFrame, "control frame must be a JSON object"))?;
        match obj.get("v") {
            None => {}
            Some(v) if v.as_u64() == Some(PROTOCOL_VERSION as u64) => {}
            Some(v) => {
                return Err(ErrorBody::new(
                    ErrorCode::UnsupportedVersion,
                    format!("unsupported protocol version {v}, expected {PROTOCOL_VERSION}"),
                ))
            }
        }
        match obj.get("kind").and_then(|k| k.as_str()) {
            Some("start" | "stop" | "set_params") => {}
            Some(other) => {
                return Err(ErrorBody::new(
                    ErrorCode::UnknownKind,
                    format!("unknown control kind {other:?}; expected start, stop or set_params"),
                ))
            }
            None => return Err(ErrorBody::new(ErrorCode::BadFrame, "missing string field \"kind\"")),
        }
        let msg: ControlMessage =
            serde_json::from_value(value).map_err(|e| ErrorBody::new(ErrorCode::BadFrame, e.to_string()))?;
        if msg.kind == ControlKind::SetParams && msg.params.is_none() {
            return Err(ErrorBody::new(ErrorCode::BadFrame, "set_params needs a \"params\" object"));
        }
        Ok(msg)
    }
}

/// Error payload of HTTP error responses and of `error` frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    #[serde(default = "v1")]
    pub v: u32,
    pub code: ErrorCode,
    pub message: String,
}

impl ErrorBody {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ErrorBody {
            v: PROTOCOL_VERSION,
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for ErrorBody {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ErrorBody {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub context_len: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub v: u32,
    pub status: String,
    pub model: ModelSummary,
    /// Whether this server hosts a live stream.
    pub stream: bool,
}

/// Live stream state, `GET /v1/stream`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamStatus {
    pub v: u32,
    pub running: bool,
    pub next_chunk: u64,
    pub total_notes: u64,
    pub clients: usize,
    pub params: GenParams,
    pub buffer_s: f64,
}

/// `POST /v1/generate`: `notes` notes from scratch or after `prompt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    #[serde(default)]
    pub params: GenParams,
    pub notes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<Vec<NoteEvent>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub v: u32,
    pub notes: Vec<NoteEvent>,
    pub chunks: u64,
    pub tokens: u64,
    pub wall_s: f64,
    pub tok_per_s: f64,
}

fn default_generations() -> usize {
    500
}

fn default_buffers() -> Vec<f64> {
    vec![0.0, 2.0]
}

/// `POST /v1/profile`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileRequest {
    #[serde(default)]
    pub params: GenParams,
    #[serde(default = "default_generations")]
    pub generations: usize,
    #[serde(default = "default_buffers")]
    pub buffers: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_override: Option<f64>,
    #[serde(default)]
    pub per_generation: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileResponse {
    pub v: u32,
    pub report: ProfileReport,
    pub density: DensityProfile,
}
