//! Client side of the data-node wire protocol.
//!
//! | request | meaning |
//! |---|---|
//! | `GET <url>` | file content |
//! | `HEAD <url>` | `Content-Length` is the file size |
//!
//! Every request carries `X-Stage-Token: <id>:<expiry>`. Status 401 means
//! the credential was rejected, 410 means the node is gone for good (with an
//! optional `X-Relocated-To: <origin>` hint), 404 means the path is unknown.

use std::pin::Pin;
use std::sync::Arc;

use async_trait::async_trait;
use bytes::Bytes;
use futures::{Stream, StreamExt};

use crate::credential::{Credential, CredentialManager, TOKEN_HEADER};
use crate::manifest::{ProbeError, SizeProber};

pub const RELOCATED_HEADER: &str = "X-Relocated-To";

pub type ByteStream = Pin<Box<dyn Stream<Item = Result<Bytes, FetchError>> + Send>>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FetchError {
    #[error("credential rejected by data node")]
    CredentialRejected,
    #[error("data node gone{}", relocated_to.as_ref().map(|r| format!(" (relocated to {r})")).unwrap_or_default())]
    Gone { relocated_to: Option<String> },
    #[error("unknown path")]
    NotFound,
    #[error("unexpected HTTP status {0}")]
    Status(u16),
    #[error("transport: {0}")]
    Transport(String),
}

#[async_trait]
pub trait DataNodeConnection: Send + Sync {
    async fn fetch(&self, url: &str, cred: &Credential) -> Result<ByteStream, FetchError>;
    async fn size(&self, url: &str, cred: &Credential) -> Result<u64, FetchError>;
}

/// HTTP/1.1 binding of [`DataNodeConnection`].
#[derive(Debug, Clone)]
pub struct HttpDataNode {
    client: reqwest::Client,
}

impl Default for HttpDataNode {
    fn default() -> Self {
        Self::new()
    }
}

impl HttpDataNode {
    pub fn new() -> Self {
        let client = reqwest::Client::builder()
            .connect_timeout(std::time::Duration::from_secs(10))
            .build()
            .expect("reqwest client");
        Self { client }
    }

    fn classify(resp: &reqwest::Response) -> Result<(), FetchError> {
        match resp.status().as_u16() {
            200..=299 => Ok(()),
            401 => Err(FetchError::CredentialRejected),
            404 => Err(FetchError::NotFound),
            410 => Err(FetchError::Gone {
                relocated_to: resp
                    .headers()
                    .get(RELOCATED_HEADER)
                    .and_then(|v| v.to_str().ok())
                    .map(str::to_string),
            }),
            other => Err(FetchError::Status(other)),
        }
    }
}

fn transport(e: reqwest::Error) -> FetchError {
    FetchError::Transport(e.to_string())
}

#[async_trait]
impl DataNodeConnection for HttpDataNode {
    async fn fetch(&self, url: &str, cred: &Credential) -> Result<ByteStream, FetchError> {
        let resp = self
            .client
            .get(url)
            .header(TOKEN_HEADER, cred.header_value())
            .send()
            .await
            .map_err(transport)?;
        Self::classify(&resp)?;
        Ok(Box::pin(resp.bytes_stream().map(|r| r.map_err(transport))))
    }

    async fn size(&self, url: &str, cred: &Credential) -> Result<u64, FetchError> {
        let resp = self
            .client
            .head(url)
            .header(TOKEN_HEADER, cred.header_value())
            .send()
            .await
            .map_err(transport)?;
        Self::classify(&resp)?;
        resp.headers()
            .get(reqwest::header::CONTENT_LENGTH)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| FetchError::Transport("HEAD response without Content-Length".into()))
    }
}

/// Size probing over a data-node connection with the run's credential.
pub struct ConnectionProber {
    conn: Arc<dyn DataNodeConnection>,
    creds: Arc<CredentialManager>,
}

impl ConnectionProber {
    pub fn new(conn: Arc<dyn DataNodeConnection>, creds: Arc<CredentialManager>) -> Self {
        Self { conn, creds }
    }
}

#[async_trait]
impl SizeProber for ConnectionProber {
    async fn probe_size(&self, url: &str) -> Result<u64, ProbeError> {
        let cred = self
            .creds
            .ensure_fresh()
            .map_err(|e| ProbeError::Protocol(e.to_string()))?;
        self.conn.size(url, &cred).await.map_err(|e| match e {
            FetchError::Transport(t) => ProbeError::Transport(t),
            other => ProbeError::Protocol(other.to_string()),
        })
    }
}
