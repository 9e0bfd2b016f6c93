//! Async client for the vstpr HTTP service.
//!
//! ```no_run
//! # async fn demo() -> Result<(), vstpr_client::Error> {
//! let client = vstpr_client::Client::new("http://127.0.0.1:8080")?;
//! client.put_currents([0.118, 0.165, 0.343]).await?;
//! println!("{:?}", client.analysis().await?.fit.status);
//! # Ok(()) }
//! ```

use reqwest::{Method, RequestBuilder, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use vstpr_core::nulling::NullReport;
use vstpr_protocol::{
    AnalysisResponse, ApiError, CurrentsRequest, HistoryResponse, Manifest, MutationResponse, NullRequest,
    ProfileResponse, PulsePatch, RunRequest, StateSummary, VERSION_HEADER,
};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("bad service URL `{0}`")]
    Url(String),
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    /// The service answered with an error status.
    #[error("{status}: {}", .body.error)]
    Api { status: StatusCode, body: ApiError },
}

impl Error {
    /// Config key or body field the service blamed, if any.
    pub fn field(&self) -> Option<&str> {
        match self {
            Error::Api { body, .. } => body.field.as_deref(),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Image or CSV bytes tagged with the state version they show.
#[derive(Debug, Clone)]
pub struct Versioned {
    pub version: Option<u64>,
    pub content_type: Option<String>,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Raw,
    Background,
    Diff,
}

impl FrameKind {
    fn as_str(self) -> &'static str {
        match self {
            FrameKind::Raw => "raw",
            FrameKind::Background => "background",
            FrameKind::Diff => "diff",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str) -> Result<Self> {
        let base = base.trim_end_matches('/');
        if !(base.starts_with("http://") || base.starts_with("https://")) {
            return Err(Error::Url(base.into()));
        }
        Ok(Client {
            base: base.into(),
            http: reqwest::Client::new(),
        })
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn request(&self, method: Method, path: &str) -> RequestBuilder {
        self.http.request(method, format!("{}{path}", self.base))
    }

    async fn send(req: RequestBuilder) -> Result<reqwest::Response> {
        let resp = req.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await.unwrap_or_default();
        let body = serde_json::from_str(&text).unwrap_or(ApiError { error: text, field: None });
        Err(Error::Api { status, body })
    }

    async fn json<T: DeserializeOwned>(req: RequestBuilder) -> Result<T> {
        Ok(Self::send(req).await?.json().await?)
    }

    async fn with_body<B: Serialize, T: DeserializeOwned>(&self, method: Method, path: &str, body: &B) -> Result<T> {
        Self::json(self.request(method, path).json(body)).await
    }

    async fn bytes(req: RequestBuilder) -> Result<Versioned> {
        let resp = Self::send(req).await?;
        let header = |name: &str| resp.headers().get(name).and_then(|v| v.to_str().ok()).map(str::to_owned);
        let version = header(VERSION_HEADER).and_then(|v| v.parse().ok());
        let content_type = header("content-type");
        Ok(Versioned {
            version,
            content_type,
            bytes: resp.bytes().await?.to_vec(),
        })
    }

    pub async fn state(&self) -> Result<StateSummary> {
        Self::json(self.request(Method::GET, "/api/state")).await
    }

    /// Currents in A. The reply is 202 with a pending status for large ensembles.
    pub async fn put_currents(&self, currents: [f64; 3]) -> Result<MutationResponse> {
        self.with_body(Method::PUT, "/api/currents", &CurrentsRequest::from(currents)).await
    }

    pub async fn put_pulse(&self, patch: &PulsePatch) -> Result<MutationResponse> {
        self.with_body(Method::PUT, "/api/pulse", patch).await
    }

    /// `format` is `png` or `pgm`.
    pub async fn frame(&self, kind: FrameKind, format: &str) -> Result<Versioned> {
        Self::bytes(self.request(Method::GET, "/api/frame").query(&[("kind", kind.as_str()), ("format", format)])).await
    }

    pub async fn profile(&self) -> Result<ProfileResponse> {
        Self::json(self.request(Method::GET, "/api/profile")).await
    }

    pub async fn profile_csv(&self) -> Result<Versioned> {
        Self::bytes(self.request(Method::GET, "/api/profile").query(&[("format", "csv")])).await
    }

    pub async fn analysis(&self) -> Result<AnalysisResponse> {
        Self::json(self.request(Method::GET, "/api/analysis")).await
    }

    pub async fn history(&self) -> Result<HistoryResponse> {
        Self::json(self.request(Method::GET, "/api/history")).await
    }

    /// Starts nulling in the background; poll [`Client::state`] until `nulling` clears.
    pub async fn null(&self, req: &NullRequest) -> Result<MutationResponse> {
        self.with_body(Method::POST, "/api/null", req).await
    }

    pub async fn last_null(&self) -> Result<NullReport> {
        Self::json(self.request(Method::GET, "/api/null")).await
    }

    pub async fn run(&self, req: &RunRequest) -> Result<Manifest> {
        self.with_body(Method::POST, "/api/run", req).await
    }
}
