//! HTTP service: a live nulling session plus batch runs.
//!
//! Routes and bodies are listed in `vstpr_protocol`.

pub mod error;
pub mod run;
pub mod session;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{FromRequest, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use tokio::net::TcpListener;
use vstpr_core::export::{pgm_bytes, png_bytes, write_profile_csv};
use vstpr_protocol::{
    AnalysisResponse, CurrentsRequest, HistoryResponse, Manifest, MutationResponse, NullRequest, ProfileResponse,
    PulsePatch, RunRequest, StateSummary, VERSION_HEADER,
};

pub use error::Failure;
pub use session::{Session, Snapshot};

/// JSON body whose syntax and schema errors both answer 400.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = Failure;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let bytes = Bytes::from_request(req, state)
            .await
            .map_err(|e| Failure::bad_request(e.body_text()))?;
        serde_json::from_slice(&bytes)
            .map(Body)
            .map_err(|e| Failure::bad_request(format!("malformed body: {e}")))
    }
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> Result<T, Failure> {
    q.map(|Query(v)| v).map_err(|e| Failure::bad_request(e.body_text()))
}

pub fn router(session: Session) -> Router {
    Router::new()
        .route("/api/state", get(state))
        .route("/api/currents", put(currents))
        .route("/api/pulse", put(pulse))
        .route("/api/frame", get(frame))
        .route("/api/profile", get(profile))
        .route("/api/analysis", get(analysis))
        .route("/api/history", get(history))
        .route("/api/null", post(start_null).get(last_null))
        .route("/api/run", post(run_op))
        .with_state(session)
}

/// Serves `router(session)` on an already bound listener until the task is dropped.
pub async fn serve(listener: TcpListener, session: Session) -> std::io::Result<()> {
    axum::serve(listener, router(session)).await
}

/// Binds `addr` (port 0 picks a free one) and serves in a background task.
pub async fn spawn(addr: SocketAddr, session: Session) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(e) = serve(listener, session).await {
            tracing::error!(error = %e, "service stopped");
        }
    });
    Ok(local)
}

async fn state(State(s): State<Session>) -> Json<StateSummary> {
    Json(s.summary())
}

fn mutation(r: Result<(StatusCode, MutationResponse), Failure>) -> Response {
    match r {
        Ok((code, body)) => (code, Json(body)).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn currents(State(s): State<Session>, Body(req): Body<CurrentsRequest>) -> Response {
    mutation(s.set_currents(req).await)
}

async fn pulse(State(s): State<Session>, Body(patch): Body<PulsePatch>) -> Response {
    mutation(s.patch_pulse(patch).await)
}

fn latest(s: &Session) -> Result<Arc<Snapshot>, Failure> {
    s.snapshot().ok_or_else(|| Failure::not_found("nothing simulated yet; PUT /api/currents first"))
}

#[derive(Debug, Deserialize)]
struct FrameQuery {
    #[serde(default = "diff")]
    kind: String,
    #[serde(default = "png")]
    format: String,
}

fn diff() -> String {
    "diff".into()
}

fn png() -> String {
    "png".into()
}

fn versioned(version: u64, content_type: &'static str, body: Vec<u8>) -> Response {
    (
        [
            (header::CONTENT_TYPE, HeaderValue::from_static(content_type)),
            (header::HeaderName::from_static(VERSION_HEADER), HeaderValue::from(version)),
        ],
        body,
    )
        .into_response()
}

async fn frame(State(s): State<Session>, q: Result<Query<FrameQuery>, QueryRejection>) -> Result<Response, Failure> {
    let q = query(q)?;
    let snap = latest(&s)?;
    let frame = match q.kind.as_str() {
        "raw" => &snap.sim.with_pulse,
        "background" => &snap.sim.without_pulse,
        "diff" => &snap.sim.difference,
        other => return Err(Failure::bad_request(format!("unknown frame kind `{other}`; expected raw, background or diff"))),
    };
    match q.format.as_str() {
        "png" => Ok(versioned(snap.version, "image/png", png_bytes(frame)?)),
        "pgm" => {
            let (bytes, sidecar) = pgm_bytes(frame)?;
            let mut r = versioned(snap.version, "image/x-portable-graymap", bytes);
            let h = r.headers_mut();
            h.insert("x-count-offset", HeaderValue::from_str(&sidecar.offset.to_string()).expect("number"));
            h.insert("x-count-scale", HeaderValue::from_str(&sidecar.scale.to_string()).expect("number"));
            Ok(r)
        }
        other => Err(Failure::bad_request(format!("unknown format `{other}`; expected png or pgm"))),
    }
}

#[derive(Debug, Deserialize)]
struct FormatQuery {
    #[serde(default = "json")]
    format: String,
}

fn json() -> String {
    "json".into()
}

async fn profile(State(s): State<Session>, q: Result<Query<FormatQuery>, QueryRejection>) -> Result<Response, Failure> {
    let q = query(q)?;
    let snap = latest(&s)?;
    match q.format.as_str() {
        "json" => Ok(Json(ProfileResponse {
            version: snap.version,
            profile: snap.sim.profile.clone(),
        })
        .into_response()),
        "csv" => {
            let mut out = Vec::new();
            write_profile_csv(&snap.sim.profile, &mut out)?;
            Ok(versioned(snap.version, "text/csv", out))
        }
        other => Err(Failure::bad_request(format!("unknown format `{other}`; expected json or csv"))),
    }
}

async fn analysis(State(s): State<Session>) -> Result<Json<AnalysisResponse>, Failure> {
    let snap = latest(&s)?;
    Ok(Json(AnalysisResponse {
        version: snap.version,
        currents: snap.currents,
        fit: snap.fit.clone(),
    }))
}

async fn history(State(s): State<Session>) -> Json<HistoryResponse> {
    Json(s.history())
}

async fn start_null(State(s): State<Session>, Body(req): Body<NullRequest>) -> Result<Response, Failure> {
    let r = s.start_null(req)?;
    Ok((StatusCode::ACCEPTED, Json(r)).into_response())
}

async fn last_null(State(s): State<Session>) -> Result<Response, Failure> {
    let report = s.last_null().ok_or_else(|| Failure::not_found("no nulling run has finished"))?;
    Ok(Json(&*report).into_response())
}

async fn run_op(Body(req): Body<RunRequest>) -> Result<Json<Manifest>, Failure> {
    let manifest = tokio::task::spawn_blocking(move || run::execute(&req))
        .await
        .map_err(|e| Failure::internal(e.to_string()))??;
    Ok(Json(manifest))
}
