//! Async client for the TileGAN HTTP service.
//!
//! ```no_run
//! # async fn demo() -> Result<(), tilegan_client::ClientError> {
//! use tilegan_api::{EditRequest, Region};
//!
//! let client = tilegan_client::Client::new("http://127.0.0.1:8080");
//! let png = std::fs::read("guidance.png").unwrap();
//! let field = client.create_field(&png, 32, 24, None, Default::default()).await?;
//! let brush = EditRequest::Brush { rect: Region::new(3, 4, 1, 1), cluster: 2, seed: 7 };
//! client.edit(field.id, &brush).await?;
//! # Ok(()) }
//! ```

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use reqwest::{Method, Response, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub use tilegan_api as api;
use tilegan_api::{
    ClusterInfo, CreateField, EditRequest, EditResponse, EnergyOverrides, ErrorBody, Event, FieldInfo, RefineAction,
    RefineRequest, RefineStatus,
};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server returned {status}: {message}")]
    Api { status: StatusCode, message: String },
    #[error("bad response: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Http(e) => e.status(),
            ClientError::Decode(_) => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

async fn check(resp: Response) -> Result<Response> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let text = resp.text().await.unwrap_or_default();
    let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
    Err(ClientError::Api { status, message })
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self::with_http(base, reqwest::Client::new())
    }

    pub fn with_http(base: impl Into<String>, http: reqwest::Client) -> Self {
        Self { base: base.into().trim_end_matches('/').to_string(), http }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn send(&self, method: Method, path: &str, body: Option<&impl Serialize>) -> Result<Response> {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(b) = body {
            req = req.json(b);
        }
        check(req.send().await?).await
    }

    async fn json<T: DeserializeOwned>(&self, method: Method, path: &str, body: Option<&impl Serialize>) -> Result<T> {
        let bytes = self.send(method, path, body).await?.bytes().await?;
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode(e.to_string()))
    }

    async fn bytes(&self, path: &str) -> Result<Vec<u8>> {
        Ok(self.send(Method::GET, path, None::<&()>).await?.bytes().await?.to_vec())
    }

    pub async fn health(&self) -> Result<()> {
        self.send(Method::GET, "/health", None::<&()>).await.map(drop)
    }

    pub async fn clusters(&self) -> Result<Vec<ClusterInfo>> {
        self.json(Method::GET, "/clusters", None::<&()>).await
    }

    pub async fn fields(&self) -> Result<Vec<u64>> {
        self.json(Method::GET, "/fields", None::<&()>).await
    }

    /// Creates a field from PNG guidance, optionally loading latents from a
    /// TGF1 file instead of tiling them.
    pub async fn create_field(
        &self,
        guidance_png: &[u8],
        cells_x: usize,
        cells_y: usize,
        field_tgf1: Option<&[u8]>,
        params: EnergyOverrides,
    ) -> Result<FieldInfo> {
        let req = CreateField {
            guidance_png: BASE64.encode(guidance_png),
            cells_x,
            cells_y,
            field_tgf1: field_tgf1.map(|b| BASE64.encode(b)),
            params,
        };
        self.json(Method::POST, "/fields", Some(&req)).await
    }

    pub async fn field(&self, id: u64) -> Result<FieldInfo> {
        self.json(Method::GET, &format!("/fields/{id}"), None::<&()>).await
    }

    pub async fn delete_field(&self, id: u64) -> Result<()> {
        self.send(Method::DELETE, &format!("/fields/{id}"), None::<&()>).await.map(drop)
    }

    pub async fn edit(&self, id: u64, edit: &EditRequest) -> Result<EditResponse> {
        self.json(Method::POST, &format!("/fields/{id}/edits"), Some(edit)).await
    }

    pub async fn refine(&self, id: u64, action: RefineAction, seed: Option<u64>) -> Result<RefineStatus> {
        self.json(Method::POST, &format!("/fields/{id}/refine"), Some(&RefineRequest { action, seed })).await
    }

    /// PNG bytes of one pyramid tile.
    pub async fn tile(&self, id: u64, z: u32, tx: usize, ty: usize) -> Result<Vec<u8>> {
        self.bytes(&format!("/fields/{id}/tiles/{z}/{tx}/{ty}")).await
    }

    /// PNG of the whole rendered field.
    pub async fn image(&self, id: u64) -> Result<Vec<u8>> {
        self.bytes(&format!("/fields/{id}/image")).await
    }

    /// The field as a TGF1 file.
    pub async fn field_file(&self, id: u64) -> Result<Vec<u8>> {
        self.bytes(&format!("/fields/{id}/field")).await
    }

    /// Text command log of everything applied to the field.
    pub async fn command_log(&self, id: u64) -> Result<String> {
        Ok(self.send(Method::GET, &format!("/fields/{id}/log"), None::<&()>).await?.text().await?)
    }

    pub async fn events(&self, id: u64) -> Result<EventStream> {
        let resp = self.send(Method::GET, &format!("/fields/{id}/events"), None::<&()>).await?;
        Ok(EventStream { resp, buf: Vec::new() })
    }
}

/// Reader over a field's newline-delimited event stream.
pub struct EventStream {
    resp: Response,
    buf: Vec<u8>,
}

impl EventStream {
    /// The next event, or `None` once the server closes the stream.
    pub async fn next(&mut self) -> Result<Option<Event>> {
        loop {
            if let Some(i) = self.buf.iter().position(|&b| b == b'\n') {
                let line: Vec<u8> = self.buf.drain(..=i).collect();
                return serde_json::from_slice(&line[..line.len() - 1])
                    .map(Some)
                    .map_err(|e| ClientError::Decode(e.to_string()));
            }
            match self.resp.chunk().await? {
                Some(chunk) => self.buf.extend_from_slice(&chunk),
                None => return Ok(None),
            }
        }
    }
}
