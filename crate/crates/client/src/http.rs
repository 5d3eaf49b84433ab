//! Blocking HTTP adapter for the model-backend protocol.

use std::sync::Arc;
use std::time::Duration;

use reqwest::blocking::Client;
use scope_core::backends::{
    validate_response, BackendDescriptor, BackendError, BackendKind, BackendResult, Backends, DepthEstimator,
    DepthRequest, DepthResponse, Endpoint, Envelope, ErrorBody, LanguageModel, LlmRequest, LlmResponse,
    PointSegmenter, PropagateRequest, PropagateResponse, Propagator, SegmentPointRequest, SegmentPointResponse,
    SegmentTextRequest, SegmentTextResponse, SttRequest, SttResponse, TextSegmenter, Transcriber, PROTOCOL_VERSION,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// One server reached at `{base}/v1/{kind}`.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    base: String,
    client: Client,
    timeout: Duration,
}

impl HttpBackend {
    /// `timeout` bounds each whole request, connect included.
    pub fn new(base_url: &str, timeout: Duration) -> BackendResult<Self> {
        if timeout.is_zero() {
            return Err(BackendError::Protocol("timeout must be positive".into()));
        }
        let client = Client::builder()
            .timeout(timeout)
            .connect_timeout(timeout)
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(Self {
            base: base_url.trim_end_matches('/').to_owned(),
            client,
            timeout,
        })
    }

    pub fn from_descriptor(d: &BackendDescriptor) -> BackendResult<Self> {
        match &d.endpoint {
            Endpoint::Http(url) => Self::new(url, Duration::from_millis(d.timeout_ms)),
            Endpoint::Mock => Err(BackendError::Protocol(format!("{} descriptor is in-process", d.kind))),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn timeout_error(&self, kind: BackendKind) -> BackendError {
        BackendError::Timeout {
            kind,
            timeout_ms: self.timeout.as_millis() as u64,
        }
    }

    /// Sends one request envelope; returns the validated response payload.
    pub fn call(&self, kind: BackendKind, payload: Value) -> BackendResult<Value> {
        let url = format!("{}/v1/{kind}", self.base);
        let resp = self
            .client
            .post(&url)
            .json(&Envelope::new(kind, payload))
            .send()
            .map_err(|e| if e.is_timeout() { self.timeout_error(kind) } else { BackendError::Unavailable(e.to_string()) })?;
        let status = resp.status();
        let bytes = resp
            .bytes()
            .map_err(|e| if e.is_timeout() { self.timeout_error(kind) } else { BackendError::Unavailable(e.to_string()) })?;
        if !status.is_success() {
            return Err(match serde_json::from_slice::<ErrorBody>(&bytes) {
                Ok(body) => BackendError::Rejected(body),
                Err(_) => BackendError::Unavailable(format!("{url} answered {status}")),
            });
        }
        let env: Envelope<Value> =
            serde_json::from_slice(&bytes).map_err(|e| BackendError::Protocol(format!("{kind} response envelope: {e}")))?;
        if env.kind != kind {
            return Err(BackendError::Protocol(format!("asked {kind}, answered {}", env.kind)));
        }
        if env.version != PROTOCOL_VERSION {
            return Err(BackendError::Protocol(format!("protocol version {:?}", env.version)));
        }
        validate_response(kind, &env.payload)?;
        Ok(env.payload)
    }

    fn typed<Q: Serialize, R: DeserializeOwned>(&self, kind: BackendKind, req: &Q) -> BackendResult<R> {
        let payload = serde_json::to_value(req).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let value = self.call(kind, payload)?;
        serde_json::from_value(value).map_err(|e| BackendError::Protocol(format!("{kind} payload: {e}")))
    }

    /// `GET /v1/healthz`.
    pub fn health(&self) -> BackendResult<Value> {
        let resp = self
            .client
            .get(format!("{}/v1/healthz", self.base))
            .send()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        resp.json().map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

impl Transcriber for HttpBackend {
    fn transcribe(&self, req: &SttRequest) -> BackendResult<SttResponse> {
        self.typed(BackendKind::Stt, req)
    }
}

impl LanguageModel for HttpBackend {
    fn complete(&self, req: &LlmRequest) -> BackendResult<LlmResponse> {
        self.typed(BackendKind::Llm, req)
    }
}

impl TextSegmenter for HttpBackend {
    fn segment_text(&self, req: &SegmentTextRequest) -> BackendResult<SegmentTextResponse> {
        self.typed(BackendKind::SegmentText, req)
    }
}

impl PointSegmenter for HttpBackend {
    fn segment_point(&self, req: &SegmentPointRequest) -> BackendResult<SegmentPointResponse> {
        self.typed(BackendKind::SegmentPoint, req)
    }
}

impl Propagator for HttpBackend {
    fn propagate(&self, req: &PropagateRequest) -> BackendResult<PropagateResponse> {
        self.typed(BackendKind::Propagate, req)
    }
}

impl DepthEstimator for HttpBackend {
    fn depth(&self, req: &DepthRequest) -> BackendResult<DepthResponse> {
        self.typed(BackendKind::Depth, req)
    }
}

/// All six kinds from one server.
pub fn http_backends(base_url: &str, timeout: Duration) -> BackendResult<Backends> {
    Ok(Backends::uniform(Arc::new(HttpBackend::new(base_url, timeout)?)))
}

/// Descriptors for all six kinds at one server.
pub fn http_descriptors(base_url: &str, timeout: Duration) -> BackendResult<Vec<BackendDescriptor>> {
    BackendKind::ALL
        .iter()
        .map(|&k| BackendDescriptor::new(k, Endpoint::Http(base_url.to_owned()), timeout.as_millis() as u64))
        .collect()
}
