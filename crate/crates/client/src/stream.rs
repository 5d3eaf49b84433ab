//! Live session client: the websocket event stream and the HTTP control
//! endpoints.

use futures::{SinkExt, StreamExt};
use reqwest::blocking::Client;
use scope_core::session::{AdvanceReport, CommandEnvelope, ServerMessage, SessionSnapshot};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("http: {0}")]
    Http(String),
    #[error("websocket: {0}")]
    WebSocket(String),
    #[error("decoding server message: {0}")]
    Decode(String),
    #[error("server answered {status}: {body}")]
    Status { status: u16, body: String },
}

fn ws_url(base: &str, since: Option<u64>) -> String {
    let base = base.trim_end_matches('/');
    let base = if let Some(rest) = base.strip_prefix("https://") {
        format!("wss://{rest}")
    } else if let Some(rest) = base.strip_prefix("http://") {
        format!("ws://{rest}")
    } else {
        base.to_owned()
    };
    match since {
        Some(s) => format!("{base}/v1/session/events?since={s}"),
        None => format!("{base}/v1/session/events"),
    }
}

/// One websocket connection to the event stream. Tracks the last sequence
/// number seen so a dropped connection can be resumed without repeats.
pub struct EventStream {
    base: String,
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
    last_seq: Option<u64>,
}

impl EventStream {
    /// Without `since` the server opens with a snapshot; with it, the server
    /// replays every later event.
    pub async fn connect(base_url: &str, since: Option<u64>) -> Result<Self, ClientError> {
        let (ws, _) = tokio_tungstenite::connect_async(ws_url(base_url, since))
            .await
            .map_err(|e| ClientError::WebSocket(e.to_string()))?;
        Ok(Self {
            base: base_url.to_owned(),
            ws,
            last_seq: since,
        })
    }

    pub fn last_seq(&self) -> Option<u64> {
        self.last_seq
    }

    /// Next server message; `None` once the server closes the connection.
    pub async fn next(&mut self) -> Option<Result<ServerMessage, ClientError>> {
        loop {
            let msg = match self.ws.next().await? {
                Ok(m) => m,
                Err(e) => return Some(Err(ClientError::WebSocket(e.to_string()))),
            };
            let text = match msg {
                Message::Text(t) => t,
                Message::Close(_) => return None,
                _ => continue,
            };
            let parsed: Result<ServerMessage, _> = serde_json::from_str(text.as_str());
            return Some(match parsed {
                Ok(m) => {
                    match &m {
                        ServerMessage::Event { event } => self.last_seq = Some(event.seq),
                        ServerMessage::Snapshot { snapshot } => self.last_seq = snapshot.last_seq.or(self.last_seq),
                        _ => {}
                    }
                    Ok(m)
                }
                Err(e) => Err(ClientError::Decode(e.to_string())),
            });
        }
    }

    /// Sends a command over the stream; the server answers with an ack
    /// message in the stream.
    pub async fn send(&mut self, command: &CommandEnvelope) -> Result<(), ClientError> {
        let text = serde_json::to_string(command).map_err(|e| ClientError::Decode(e.to_string()))?;
        self.ws
            .send(Message::Text(text.into()))
            .await
            .map_err(|e| ClientError::WebSocket(e.to_string()))
    }

    /// Opens a fresh connection that continues after the last event seen.
    pub async fn reconnect(self) -> Result<Self, ClientError> {
        let (base, since) = (self.base.clone(), self.last_seq);
        self.close().await;
        Self::connect(&base, since).await
    }

    pub async fn close(mut self) {
        let _ = self.ws.close(None).await;
    }
}

/// Blocking client for the session control endpoints.
#[derive(Debug, Clone)]
pub struct SessionControl {
    base: String,
    client: Client,
}

impl SessionControl {
    pub fn new(base_url: &str) -> Result<Self, ClientError> {
        Ok(Self {
            base: base_url.trim_end_matches('/').to_owned(),
            client: Client::builder().build().map_err(|e| ClientError::Http(e.to_string()))?,
        })
    }

    fn check(resp: reqwest::blocking::Response) -> Result<reqwest::blocking::Response, ClientError> {
        let status = resp.status();
        if status.is_success() {
            Ok(resp)
        } else {
            Err(ClientError::Status {
                status: status.as_u16(),
                body: resp.text().unwrap_or_default(),
            })
        }
    }

    fn decode<T: serde::de::DeserializeOwned>(resp: reqwest::blocking::Response) -> Result<T, ClientError> {
        Self::check(resp)?.json().map_err(|e| ClientError::Decode(e.to_string()))
    }

    /// Returns the server's ack, which says whether the id was a duplicate.
    pub fn command(&self, command: &CommandEnvelope) -> Result<ServerMessage, ClientError> {
        let resp = self
            .client
            .post(format!("{}/v1/session/command", self.base))
            .json(command)
            .send()
            .map_err(|e| ClientError::Http(e.to_string()))?;
        Self::decode(resp)
    }

    pub fn snapshot(&self) -> Result<SessionSnapshot, ClientError> {
        let resp = self
            .client
            .get(format!("{}/v1/session/snapshot", self.base))
            .send()
            .map_err(|e| ClientError::Http(e.to_string()))?;
        Self::decode(resp)
    }

    /// Manual-clock servers only.
    pub fn advance(&self, frames: usize) -> Result<AdvanceReport, ClientError> {
        let resp = self
            .client
            .post(format!("{}/v1/session/advance", self.base))
            .json(&serde_json::json!({ "frames": frames }))
            .send()
            .map_err(|e| ClientError::Http(e.to_string()))?;
        Self::decode(resp)
    }
}
