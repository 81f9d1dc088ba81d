//! Async client for a running notestream service.
//!
//! ```no_run
//! # async fn demo() -> Result<(), notestream_client::ClientError> {
//! use notestream_client::Client;
//! use notestream_protocol::GenerateRequest;
//!
//! let client = Client::new("http://127.0.0.1:8700")?;
//! let reply = client
//!     .generate(&GenerateRequest { params: Default::default(), notes: 100, prompt: None })
//!     .await?;
//! println!("{} notes", reply.notes.len());
//! # Ok(()) }
//! ```

use futures::{SinkExt, StreamExt};
use notestream_protocol::{
    ControlMessage, ErrorBody, ErrorCode, GenerateRequest, GenerateResponse, Health, ProfileRequest, ProfileResponse,
    ServerFrame, StreamStatus, VocabSummary,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};
use url::Url;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("invalid server URL: {0}")]
    Url(String),
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    /// The server answered with an error body.
    #[error("server returned {status}: {body}")]
    Api { status: u16, body: ErrorBody },
    #[error("websocket: {0}")]
    Ws(#[from] tokio_tungstenite::tungstenite::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl ClientError {
    /// The server's error code, when the server produced one.
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            ClientError::Api { body, .. } => Some(body.code),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: Url,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8700`.
    pub fn new(base: &str) -> Result<Self, ClientError> {
        let mut base = Url::parse(base).map_err(|e| ClientError::Url(format!("{base}: {e}")))?;
        if !matches!(base.scheme(), "http" | "https") {
            return Err(ClientError::Url(format!("{base}: expected an http:// URL")));
        }
        if !base.path().ends_with('/') {
            let p = format!("{}/", base.path());
            base.set_path(&p);
        }
        Ok(Client {
            base,
            http: reqwest::Client::new(),
        })
    }

    pub fn base(&self) -> &Url {
        &self.base
    }

    fn url(&self, path: &str) -> Url {
        self.base.join(path).expect("relative API paths always join")
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
        let status = resp.status();
        let bytes = resp.bytes().await?;
        if !status.is_success() {
            let body = serde_json::from_slice(&bytes).unwrap_or_else(|_| {
                ErrorBody::new(ErrorCode::Internal, String::from_utf8_lossy(&bytes).into_owned())
            });
            return Err(ClientError::Api {
                status: status.as_u16(),
                body,
            });
        }
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Protocol(format!("bad response body: {e}")))
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        Self::decode(self.http.get(self.url(path)).send().await?).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        Self::decode(self.http.post(self.url(path)).json(body).send().await?).await
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        self.get("v1/health").await
    }

    pub async fn vocab(&self) -> Result<VocabSummary, ClientError> {
        self.get("v1/vocab").await
    }

    pub async fn stream_status(&self) -> Result<StreamStatus, ClientError> {
        self.get("v1/stream").await
    }

    pub async fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, ClientError> {
        self.post("v1/generate", req).await
    }

    pub async fn profile(&self, req: &ProfileRequest) -> Result<ProfileResponse, ClientError> {
        self.post("v1/profile", req).await
    }

    /// Send a control message over HTTP. Returns the chunk it applies from.
    pub async fn control(&self, msg: &ControlMessage) -> Result<u64, ClientError> {
        match self.post("v1/stream/control", msg).await? {
            ServerFrame::Ack { applied_at_chunk, .. } => Ok(applied_at_chunk),
            other => Err(ClientError::Protocol(format!("expected an ack, got {other:?}"))),
        }
    }

    /// Open the stream WebSocket and wait for the hello frame.
    pub async fn connect_stream(&self) -> Result<StreamConnection, ClientError> {
        let mut url = self.url("v1/stream/ws");
        let scheme = if url.scheme() == "https" { "wss" } else { "ws" };
        url.set_scheme(scheme).expect("ws schemes are valid");
        let (ws, _) = tokio_tungstenite::connect_async(url.as_str()).await?;
        let mut conn = StreamConnection {
            ws,
            hello: None,
            close: None,
        };
        match conn.next_frame().await? {
            Some(hello @ ServerFrame::Hello { .. }) => conn.hello = Some(hello),
            Some(other) => return Err(ClientError::Protocol(format!("first frame was not hello: {other:?}"))),
            None => return Err(ClientError::Protocol("closed before hello".into())),
        }
        Ok(conn)
    }
}

/// Close code and reason sent by the server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloseInfo {
    pub code: u16,
    pub reason: String,
}

pub struct StreamConnection {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
    hello: Option<ServerFrame>,
    close: Option<CloseInfo>,
}

impl StreamConnection {
    /// The hello frame that opened the connection.
    pub fn hello(&self) -> &ServerFrame {
        self.hello.as_ref().expect("set on connect")
    }

    /// Next server frame, or `None` once the server has closed the
    /// connection (see [`StreamConnection::close_info`]).
    pub async fn next_frame(&mut self) -> Result<Option<ServerFrame>, ClientError> {
        while let Some(msg) = self.ws.next().await {
            match msg? {
                Message::Text(t) => {
                    return serde_json::from_str(t.as_str())
                        .map(Some)
                        .map_err(|e| ClientError::Protocol(format!("bad frame {t}: {e}")))
                }
                Message::Close(frame) => {
                    self.close = frame.map(|f| CloseInfo {
                        code: f.code.into(),
                        reason: f.reason.as_str().to_owned(),
                    });
                }
                Message::Binary(_) => return Err(ClientError::Protocol("unexpected binary frame".into())),
                _ => {}
            }
        }
        Ok(None)
    }

    pub async fn send_control(&mut self, msg: &ControlMessage) -> Result<(), ClientError> {
        let text = serde_json::to_string(msg).expect("control messages always serialize");
        self.send_raw(&text).await
    }

    /// Send arbitrary text, valid or not.
    pub async fn send_raw(&mut self, text: &str) -> Result<(), ClientError> {
        self.ws.send(Message::Text(text.into())).await?;
        Ok(())
    }

    pub fn close_info(&self) -> Option<&CloseInfo> {
        self.close.as_ref()
    }

    pub async fn close(mut self) -> Result<(), ClientError> {
        match self.ws.close(None).await {
            Ok(()) | Err(tokio_tungstenite::tungstenite::Error::ConnectionClosed) => Ok(()),
            Err(e) => Err(e.into()),
        }
    }
}
