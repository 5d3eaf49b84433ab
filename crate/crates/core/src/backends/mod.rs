//! Model-service protocol.
//!
//! Every external model (speech-to-text, language model, text- and
//! point-prompted segmentation, mask propagation, depth) is reached through
//! one request envelope `{kind, version, payload}`. The traits here are the
//! in-process face of that protocol; [`mock`] implements all six kinds
//! against a [`scene::SceneTruth`], and network adapters implement them over
//! HTTP.

pub mod conformance;
pub mod mock;
pub mod scene;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::candidates::ScoredCandidate;
use crate::mask::{Mask, PixelPoint};
use crate::virtual_cursor::{DepthError, DepthMap};

pub const PROTOCOL_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Stt,
    Llm,
    SegmentText,
    SegmentPoint,
    Propagate,
    Depth,
}

impl BackendKind {
    pub const ALL: [BackendKind; 6] = [
        Self::Stt,
        Self::Llm,
        Self::SegmentText,
        Self::SegmentPoint,
        Self::Propagate,
        Self::Depth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Stt => "stt",
            Self::Llm => "llm",
            Self::SegmentText => "segment_text",
            Self::SegmentPoint => "segment_point",
            Self::Propagate => "propagate",
            Self::Depth => "depth",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown backend kind {s:?}"))
    }
}

/// Where a backend lives. Serializes as `"mock"` or the base URL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum Endpoint {
    Mock,
    Http(String),
}

impl From<Endpoint> for String {
    fn from(e: Endpoint) -> Self {
        match e {
            Endpoint::Mock => "mock".into(),
            Endpoint::Http(url) => url,
        }
    }
}

impl From<String> for Endpoint {
    fn from(s: String) -> Self {
        if s == "mock" {
            Endpoint::Mock
        } else {
            Endpoint::Http(s)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub endpoint: Endpoint,
    pub timeout_ms: u64,
    pub version: String,
}

impl BackendDescriptor {
    pub fn new(kind: BackendKind, endpoint: Endpoint, timeout_ms: u64) -> Result<Self, BackendError> {
        if timeout_ms == 0 {
            return Err(BackendError::Protocol("timeout must be positive".into()));
        }
        Ok(Self {
            kind,
            endpoint,
            timeout_ms,
            version: PROTOCOL_VERSION.into(),
        })
    }

    pub fn mock(kind: BackendKind) -> Self {
        Self::new(kind, Endpoint::Mock, 5_000).expect("positive timeout")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope<T> {
    pub kind: BackendKind,
    pub version: String,
    pub payload: T,
}

impl<T> Envelope<T> {
    pub fn new(kind: BackendKind, payload: T) -> Self {
        Self {
            kind,
            version: PROTOCOL_VERSION.into(),
            payload,
        }
    }
}

/// Error body returned by every endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub retryable: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("{kind} backend timed out after {timeout_ms} ms")]
    Timeout { kind: BackendKind, timeout_ms: u64 },
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend rejected request ({}): {}", .0.code, .0.message)]
    Rejected(ErrorBody),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl BackendError {
    pub fn is_timeout(&self) -> bool {
        matches!(self, Self::Timeout { .. })
    }

    pub fn retryable(&self) -> bool {
        match self {
            Self::Timeout { .. } | Self::Unavailable(_) => true,
            Self::Rejected(body) => body.retryable,
            Self::Protocol(_) => false,
        }
    }

    pub fn to_body(&self) -> ErrorBody {
        match self {
            Self::Rejected(body) => body.clone(),
            other => ErrorBody {
                code: match other {
                    Self::Timeout { .. } => "timeout",
                    Self::Unavailable(_) => "unavailable",
                    _ => "bad_request",
                }
                .into(),
                message: other.to_string(),
                retryable: other.retryable(),
            },
        }
    }
}

pub type BackendResult<T> = Result<T, BackendError>;

/// A frame as the backends see it: its index in the stream, plus an optional
/// locator for services that load pixels themselves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRef {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uri: Option<String>,
}

impl FrameRef {
    pub fn index(index: usize) -> Self {
        Self { index, uri: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SttRequest {
    /// Base64 audio bytes.
    pub audio_b64: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SttResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatTurn {
    pub q: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatRequest {
    pub query: String,
    /// Textual scene summary for the current step.
    pub system_inputs: Value,
    pub system_prompt: String,
    pub history: Vec<ChatTurn>,
    /// Set on the single retry after an unparseable reply.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum LlmRequest {
    Chat(ChatRequest),
    Expand { query: String, count: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum LlmResponse {
    Chat { text: String },
    Expand { alternatives: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentTextRequest {
    pub prompt: String,
    pub frame: FrameRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentTextResponse {
    pub candidates: Vec<ScoredCandidate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentPointRequest {
    pub frame: FrameRef,
    pub point: PixelPoint,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentPointResponse {
    pub mask: Option<Mask>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagateRequest {
    pub initial: Mask,
    pub from_frame: usize,
    pub to_frame: usize,
}

/// Masks for `from_frame + 1 ..= to_frame`, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagateResponse {
    pub masks: Vec<Mask>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthRequest {
    pub frame: FrameRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthResponse {
    pub width: u32,
    pub height: u32,
    /// Row-major little-endian f32.
    pub data_b64: String,
}

impl DepthResponse {
    pub fn from_map(map: &DepthMap) -> Self {
        Self {
            width: map.width(),
            height: map.height(),
            data_b64: map.to_base64(),
        }
    }

    pub fn to_map(&self) -> Result<DepthMap, DepthError> {
        DepthMap::from_base64(self.width, self.height, &self.data_b64)
    }
}

pub trait Transcriber: Send + Sync {
    fn transcribe(&self, req: &SttRequest) -> BackendResult<SttResponse>;
}

pub trait LanguageModel: Send + Sync {
    fn complete(&self, req: &LlmRequest) -> BackendResult<LlmResponse>;

    fn chat(&self, req: ChatRequest) -> BackendResult<String> {
        match self.complete(&LlmRequest::Chat(req))? {
            LlmResponse::Chat { text } => Ok(text),
            other => Err(BackendError::Protocol(format!("expected chat reply, got {other:?}"))),
        }
    }

    fn expand(&self, query: &str, count: usize) -> BackendResult<Vec<String>> {
        let req = LlmRequest::Expand {
            query: query.to_owned(),
            count,
        };
        match self.complete(&req)? {
            LlmResponse::Expand { alternatives } => Ok(alternatives),
            other => Err(BackendError::Protocol(format!("expected expansion, got {other:?}"))),
        }
    }
}

pub trait TextSegmenter: Send + Sync {
    fn segment_text(&self, req: &SegmentTextRequest) -> BackendResult<SegmentTextResponse>;
}

pub trait PointSegmenter: Send + Sync {
    fn segment_point(&self, req: &SegmentPointRequest) -> BackendResult<SegmentPointResponse>;
}

pub trait Propagator: Send + Sync {
    fn propagate(&self, req: &PropagateRequest) -> BackendResult<PropagateResponse>;
}

pub trait DepthEstimator: Send + Sync {
    fn depth(&self, req: &DepthRequest) -> BackendResult<DepthResponse>;
}

/// One handle per backend kind.
#[derive(Clone)]
pub struct Backends {
    pub stt: Arc<dyn Transcriber>,
    pub llm: Arc<dyn LanguageModel>,
    pub segment_text: Arc<dyn TextSegmenter>,
    pub segment_point: Arc<dyn PointSegmenter>,
    pub propagate: Arc<dyn Propagator>,
    pub depth: Arc<dyn DepthEstimator>,
}

impl Backends {
    /// Every kind served by one object.
    pub fn uniform<T>(service: Arc<T>) -> Self
    where
        T: Transcriber + LanguageModel + TextSegmenter + PointSegmenter + Propagator + DepthEstimator + 'static,
    {
        Self {
            stt: service.clone(),
            llm: service.clone(),
            segment_text: service.clone(),
            segment_point: service.clone(),
            propagate: service.clone(),
            depth: service,
        }
    }
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backends").finish_non_exhaustive()
    }
}

fn decode<T: serde::de::DeserializeOwned>(kind: BackendKind, payload: Value) -> BackendResult<T> {
    serde_json::from_value(payload).map_err(|e| BackendError::Protocol(format!("{kind} payload: {e}")))
}

fn encode<T: Serialize>(value: T) -> BackendResult<Value> {
    serde_json::to_value(value).map_err(|e| BackendError::Protocol(e.to_string()))
}

/// Routes an untyped payload to the matching typed backend. This is the
/// server side of the protocol; the response is the bare response payload.
pub fn dispatch(backends: &Backends, kind: BackendKind, payload: Value) -> BackendResult<Value> {
    match kind {
        BackendKind::Stt => encode(backends.stt.transcribe(&decode(kind, payload)?)?),
        BackendKind::Llm => encode(backends.llm.complete(&decode(kind, payload)?)?),
        BackendKind::SegmentText => encode(backends.segment_text.segment_text(&decode(kind, payload)?)?),
        BackendKind::SegmentPoint => encode(backends.segment_point.segment_point(&decode(kind, payload)?)?),
        BackendKind::Propagate => encode(backends.propagate.propagate(&decode(kind, payload)?)?),
        BackendKind::Depth => encode(backends.depth.depth(&decode(kind, payload)?)?),
    }
}

/// Checks that a response payload has the schema for `kind`.
pub fn validate_response(kind: BackendKind, payload: &Value) -> BackendResult<()> {
    let p = payload.clone();
    match kind {
        BackendKind::Stt => decode::<SttResponse>(kind, p).map(drop),
        BackendKind::Llm => decode::<LlmResponse>(kind, p).map(drop),
        BackendKind::SegmentText => decode::<SegmentTextResponse>(kind, p).and_then(|r| {
            r.candidates
                .iter()
                .try_for_each(|c| c.validate().map_err(|e| BackendError::Protocol(e.to_string())))
        }),
        BackendKind::SegmentPoint => decode::<SegmentPointResponse>(kind, p).map(drop),
        BackendKind::Propagate => decode::<PropagateResponse>(kind, p).map(drop),
        BackendKind::Depth => decode::<DepthResponse>(kind, p)
            .and_then(|r| r.to_map().map(drop).map_err(|e| BackendError::Protocol(e.to_string()))),
    }
}

/// Checks that a request payload has the schema for `kind`.
pub fn validate_request(kind: BackendKind, payload: &Value) -> BackendResult<()> {
    let p = payload.clone();
    match kind {
        BackendKind::Stt => decode::<SttRequest>(kind, p).map(drop),
        BackendKind::Llm => decode::<LlmRequest>(kind, p).map(drop),
        BackendKind::SegmentText => decode::<SegmentTextRequest>(kind, p).map(drop),
        BackendKind::SegmentPoint => decode::<SegmentPointRequest>(kind, p).map(drop),
        BackendKind::Propagate => decode::<PropagateRequest>(kind, p).map(drop),
        BackendKind::Depth => decode::<DepthRequest>(kind, p).map(drop),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in BackendKind::ALL {
            assert_eq!(k.as_str().parse::<BackendKind>().unwrap(), k);
            assert_eq!(serde_json::to_value(k).unwrap(), Value::String(k.as_str().into()));
        }
        assert!("video".parse::<BackendKind>().is_err());
    }

    #[test]
    fn descriptor_requires_positive_timeout() {
        assert!(BackendDescriptor::new(BackendKind::Depth, Endpoint::Mock, 0).is_err());
        let d = BackendDescriptor::new(BackendKind::Depth, Endpoint::Http("http://x:1".into()), 10).unwrap();
        let json = serde_json::to_value(&d).unwrap();
        assert_eq!(json["endpoint"], "http://x:1");
        assert_eq!(json["version"], PROTOCOL_VERSION);
    }

    #[test]
    fn envelope_shape() {
        let env = Envelope::new(BackendKind::Depth, DepthRequest { frame: FrameRef::index(4) });
        assert_eq!(
            serde_json::to_value(&env).unwrap(),
            serde_json::json!({"kind":"depth","version":"1","payload":{"frame":{"index":4}}})
        );
    }

    #[test]
    fn llm_requests_are_task_tagged() {
        let req = LlmRequest::Expand { query: "forceps".into(), count: 3 };
        assert_eq!(
            serde_json::to_value(&req).unwrap(),
            serde_json::json!({"task":"expand","query":"forceps","count":3})
        );
        assert!(validate_request(BackendKind::Llm, &serde_json::json!({"task":"dance"})).is_err());
    }

    #[test]
    fn error_bodies() {
        let e = BackendError::Timeout { kind: BackendKind::Llm, timeout_ms: 50 };
        let body = e.to_body();
        assert_eq!(body.code, "timeout");
        assert!(body.retryable);
        assert!(!BackendError::Protocol("x".into()).to_body().retryable);
    }
}
