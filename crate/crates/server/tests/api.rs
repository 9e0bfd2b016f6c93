use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use vstpr_core::config::ExperimentConfig;
use vstpr_protocol::{AnalysisResponse, HistoryResponse, Manifest, MutationResponse, MutationStatus, StateSummary};
use vstpr_server::{router, Session};

fn config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.ensemble.atom_count = 4000;
    c
}

fn app() -> (Router, Session) {
    let s = Session::new(config()).unwrap();
    (router(s.clone()), s)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>, axum::http::HeaderMap) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, headers)
}

async fn get_json<T: serde::de::DeserializeOwned>(app: &Router, uri: &str) -> T {
    let (status, body, _) = call(app, Method::GET, uri, None).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

async fn put_currents(app: &Router, c: [f64; 3]) -> (StatusCode, MutationResponse) {
    let body = json!({"ix": c[0], "iy": c[1], "iz": c[2]}).to_string();
    let (status, bytes, _) = call(app, Method::PUT, "/api/currents", Some(body)).await;
    assert!(status.is_success(), "{status}: {}", String::from_utf8_lossy(&bytes));
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn wait_idle(app: &Router) -> StateSummary {
    for _ in 0..600 {
        let s: StateSummary = get_json(app, "/api/state").await;
        if !s.pending {
            return s;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("session never went idle");
}

fn compensation() -> [f64; 3] {
    config().coils.compensation_currents()
}

#[tokio::test]
async fn frame_before_any_simulation_is_404() {
    let (app, _) = app();
    for uri in ["/api/frame?kind=raw", "/api/frame?kind=diff", "/api/profile", "/api/analysis", "/api/null"] {
        let (status, body, _) = call(&app, Method::GET, uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        let err: Value = serde_json::from_slice(&body).unwrap();
        assert!(err["error"].is_string());
    }
    let s: StateSummary = get_json(&app, "/api/state").await;
    assert_eq!(s.version, 0);
    assert_eq!(s.applied_version, None);
    assert!(s.readout.is_none());
}

#[tokio::test]
async fn malformed_bodies_are_400() {
    let (app, _) = app();
    for body in [
        "{not json",
        r#"{"ix": 0.1, "iy": 0.2}"#,
        r#"{"ix": "a", "iy": 0.2, "iz": 0.3}"#,
        r#"{"ix": 0.1, "iy": 0.2, "iz": 0.3, "extra": 1}"#,
    ] {
        let (status, bytes, _) = call(&app, Method::PUT, "/api/currents", Some(body.into())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        let err: Value = serde_json::from_slice(&bytes).unwrap();
        assert!(err["error"].as_str().unwrap().contains("malformed"));
    }
    let (status, _, _) = call(&app, Method::PUT, "/api/pulse", Some(r#"{"rabi":1}"#.into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _, _) = call(&app, Method::PUT, "/api/pulse", Some("{}".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    // rejected mutations do not bump the version
    let s: StateSummary = get_json(&app, "/api/state").await;
    assert_eq!(s.version, 0);
}

#[tokio::test]
async fn invalid_values_name_the_field() {
    let (app, _) = app();
    // pulse ending after the image
    let (status, bytes, _) = call(&app, Method::PUT, "/api/pulse", Some(r#"{"duration": 0.03}"#.into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(err["field"], "imaging.image_time", "{err}");
    let (status, bytes, _) = call(&app, Method::PUT, "/api/pulse", Some(r#"{"mode": "sideways"}"#.into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(err["field"], "pulse.mode");
    // 5 A on x is far beyond the Faraday Nyquist limit
    let (status, bytes, _) = call(&app, Method::PUT, "/api/currents", Some(r#"{"ix": 5, "iy": 0, "iz": 0}"#.into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err: Value = serde_json::from_slice(&bytes).unwrap();
    assert!(err["field"].is_string());
}

#[tokio::test]
async fn put_currents_serves_frames_profile_and_analysis() {
    let (app, _) = app();
    let mut c = compensation();
    c[2] += 0.1;
    let (status, r) = put_currents(&app, c).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(r.version, 1);
    assert_eq!(r.status, MutationStatus::Applied);

    let (status, png, headers) = call(&app, Method::GET, "/api/frame?kind=diff", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["content-type"], "image/png");
    assert_eq!(headers["x-state-version"], "1");
    assert_eq!(&png[1..4], b"PNG");

    let (status, pgm, headers) = call(&app, Method::GET, "/api/frame?kind=raw&format=pgm", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(pgm.starts_with(b"P5\n512 512\n65535\n"));
    assert!(headers.contains_key("x-count-scale"));

    let (status, _, _) = call(&app, Method::GET, "/api/frame?kind=sideways", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, csv, _) = call(&app, Method::GET, "/api/profile?format=csv", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8(csv).unwrap().starts_with("x_meters,counts\n"));
    let profile: Value = get_json(&app, "/api/profile").await;
    assert_eq!(profile["profile"]["x"].as_array().unwrap().len(), 512);

    let a: AnalysisResponse = get_json(&app, "/api/analysis").await;
    assert_eq!(a.version, 1);
    assert_eq!(a.currents, c);
    // 100 mA on z: about 152 mG
    assert_eq!(a.fit.status, vstpr_core::analysis::FitStatus::Resolved);
    assert!((a.fit.field - 0.1524).abs() < 0.01, "{}", a.fit.field);

    let s: StateSummary = get_json(&app, "/api/state").await;
    assert_eq!(s.applied_version, Some(1));
    assert_eq!(s.history_len, 1);
    let h: HistoryResponse = get_json(&app, "/api/history").await;
    assert_eq!(h.entries[0].currents, c);
    assert!(h.entries[0].larmor > 0.0);
}

#[tokio::test]
async fn compensation_currents_give_an_unresolved_fit_with_a_small_bound() {
    let s = Session::new({
        let mut c = config();
        c.ensemble.atom_count = 20_000;
        c
    })
    .unwrap();
    let app = router(s);
    put_currents(&app, compensation()).await;
    let a: AnalysisResponse = get_json(&app, "/api/analysis").await;
    assert_eq!(a.fit.status, vstpr_core::analysis::FitStatus::Unresolved);
    let bound = a.fit.field_upper_bound.unwrap();
    // the stripe width alone, against 152 mG per 100 mA of mistuning
    assert!(bound > 0.0 && bound < 0.02, "{bound}");
}

#[tokio::test]
async fn concurrent_puts_get_distinct_versions_and_the_later_wins() {
    let (app, _) = app();
    let i0 = compensation();
    let a = [i0[0], i0[1], i0[2] + 0.05];
    let b = [i0[0], i0[1] + 0.08, i0[2]];
    let (ra, rb) = tokio::join!(put_currents(&app, a), put_currents(&app, b));
    let (ra, rb) = (ra.1, rb.1);
    assert_ne!(ra.version, rb.version);
    let s = wait_idle(&app).await;
    let later = if ra.version > rb.version { a } else { b };
    assert_eq!(s.version, ra.version.max(rb.version));
    assert_eq!(s.currents, later);
    assert_eq!(s.applied_currents, Some(later));
    assert_eq!(s.applied_version, Some(s.version));
    let an: AnalysisResponse = get_json(&app, "/api/analysis").await;
    assert_eq!(an.currents, later);
}

#[tokio::test]
async fn versions_strictly_increase() {
    let (app, _) = app();
    let i0 = compensation();
    let mut last = 0;
    for k in 0..4 {
        let (_, r) = put_currents(&app, [i0[0], i0[1], i0[2] + 0.02 * f64::from(k)]).await;
        assert!(r.version > last);
        last = r.version;
    }
    let (status, bytes, _) = call(&app, Method::PUT, "/api/pulse", Some(r#"{"rabi_freq_hz": 8000}"#.into())).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    let r: MutationResponse = serde_json::from_slice(&bytes).unwrap();
    assert!(r.version > last);
    let s: StateSummary = get_json(&app, "/api/state").await;
    assert_eq!(s.version, r.version);
    assert!((s.config.pulse.rabi_freq - std::f64::consts::TAU * 8000.0).abs() < 1e-9);
}

#[tokio::test]
async fn large_ensembles_answer_202_and_are_polled() {
    let s = Session::new(config()).unwrap().with_sync_atom_limit(1000);
    let app = router(s);
    let mut c = compensation();
    c[1] += 0.1;
    let (status, r) = put_currents(&app, c).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(r.status, MutationStatus::Pending);
    let s = wait_idle(&app).await;
    assert_eq!(s.applied_version, Some(r.version));
    assert!(s.readout.is_some());
}

#[tokio::test]
async fn null_runs_in_the_background() {
    let mut c = config();
    c.ensemble.atom_count = 20_000;
    let app = router(Session::new(c).unwrap());
    let i0 = compensation();
    let start = [i0[0] + 0.03, i0[1] - 0.03, i0[2] + 0.03];
    let body = json!({
        "start": start,
        "options": {"sweeps": 1, "bracket": 0.06, "shrink": 0.5, "tolerance": 0.002, "order": [0, 1, 2], "bias": 0.1}
    })
    .to_string();
    let (status, bytes, _) = call(&app, Method::POST, "/api/null", Some(body.clone())).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&bytes));
    // a second run and manual steps are refused meanwhile
    let (status, _, _) = call(&app, Method::POST, "/api/null", Some(body)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _, _) = call(&app, Method::PUT, "/api/currents", Some(json!({"ix": 0, "iy": 0, "iz": 0}).to_string())).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let s = wait_idle(&app).await;
    assert!(s.last_error.is_none(), "{:?}", s.last_error);
    let h: HistoryResponse = get_json(&app, "/api/history").await;
    assert!(h.entries.iter().filter(|e| e.objective.is_some()).count() > 10);
    assert!(h.entries.windows(2).all(|w| w[0].version < w[1].version));
    let report: Value = get_json(&app, "/api/null").await;
    let currents: Vec<f64> = serde_json::from_value(report["currents"].clone()).unwrap();
    assert_eq!(s.currents.to_vec(), currents);
    for k in 0..3 {
        assert!((currents[k] - i0[k]).abs() < 0.004, "axis {k}: {} vs {}", currents[k], i0[k]);
    }
}

#[tokio::test]
async fn run_writes_a_reproducible_directory() {
    let (app, _) = app();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut manifests = Vec::new();
    for d in &dirs {
        let body = json!({
            "config": {"text": "ensemble.atom_count = 3000\nseed = 7\n", "overrides": [["coils.z.current", "0.3431"]]},
            "out": d.path(),
            "operation": {"op": "simulate"}
        })
        .to_string();
        let (status, bytes, _) = call(&app, Method::POST, "/api/run", Some(body)).await;
        assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
        let m: Manifest = serde_json::from_slice(&bytes).unwrap();
        manifests.push(m);
    }
    assert_eq!(manifests[0], manifests[1]);
    let m = &manifests[0];
    assert_eq!(m.operation, "simulate");
    assert_eq!(m.seed, 7);
    assert_eq!(m.fit_failures, 0);
    for f in ["config.txt", "frames/difference.pgm", "frames/difference.json", "profiles/difference.csv", "results/measurement.json"] {
        assert!(m.files.iter().any(|x| x.path == f), "{f} missing");
    }
    let read = |i: usize, f: &str| std::fs::read(dirs[i].path().join(f)).unwrap();
    assert_eq!(read(0, "results/measurement.json"), read(1, "results/measurement.json"));
    assert_eq!(read(0, "manifest.json"), read(1, "manifest.json"));
}

#[tokio::test]
async fn run_reports_config_errors_by_key() {
    let (app, _) = app();
    let d = tempfile::tempdir().unwrap();
    let body = json!({
        "config": {"text": "pulse.rabi_freq_hz = fast\n", "name": "bad.cfg"},
        "out": d.path(),
        "operation": {"op": "calibrate"}
    })
    .to_string();
    let (status, bytes, _) = call(&app, Method::POST, "/api/run", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(err["field"], "pulse.rabi_freq_hz");

    let body = json!({"out": d.path(), "operation": {"op": "fit", "input": d.path().join("nothing")}}).to_string();
    let (status, _, _) = call(&app, Method::POST, "/api/run", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}
