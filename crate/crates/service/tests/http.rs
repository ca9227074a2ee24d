use actwm_core::worldmodel::WorldModel;
use actwm_service::{router, AppState, ServiceConfig};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    app: Router,
    ckpt: String,
    _dir: tempfile::TempDir,
}

fn fixture(expose: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.awm");
    WorldModel::new(5).save(&path).unwrap();
    let cfg = ServiceConfig { expose_disturbance: expose, ..Default::default() };
    Fixture { app: router(AppState::new(cfg)), ckpt: path.to_string_lossy().into_owned(), _dir: dir }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, v)
}

async fn new_session(f: &Fixture, seed: u64) -> String {
    let (st, v) = call(&f.app, "POST", "/sessions", Some(json!({ "ckpt": f.ckpt, "seed": seed }))).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health() {
    let f = fixture(false);
    let (st, v) = call(&f.app, "GET", "/healthz", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v, json!({ "status": "ok" }));
}

#[tokio::test]
async fn session_lifecycle() {
    let f = fixture(false);
    let id = new_session(&f, 3).await;
    let (st, s) = call(&f.app, "GET", &format!("/sessions/{id}/state"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(s["nominal_params"], json!([0.5, 0.5, 0.5]));
    assert_eq!(s["cycle_counter"], 0);
    assert_eq!(s["reference_curve"].as_array().unwrap().len(), 500);

    let (st, c) = call(&f.app, "POST", &format!("/sessions/{id}/cycle"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(c["cycle_id"], 1);
    assert_eq!(c["observed_curve"].as_array().unwrap().len(), 500);
    assert_eq!(c["suggested_action"].as_array().unwrap().len(), 3);
    assert_eq!(c["latent_point_2d"].as_array().unwrap().len(), 2);
    assert!(c["deviation_score"].as_f64().unwrap() >= 0.0);
    let (_, c2) = call(&f.app, "POST", &format!("/sessions/{id}/cycle"), None).await;
    assert_eq!(c2["cycle_id"], 2);

    let (st, a) = call(&f.app, "POST", &format!("/sessions/{id}/adjust"), Some(json!({ "delta": [0.7, 0.0, -0.1] }))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(a["nominal_params"], json!([1.0, 0.5, 0.4]));

    let (st, _) = call(&f.app, "POST", &format!("/sessions/{id}/adjust"), Some(json!({ "delta": [0.1] }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let (st, r) = call(&f.app, "POST", &format!("/sessions/{id}/reset"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(r, json!({}));
    let (_, s) = call(&f.app, "GET", &format!("/sessions/{id}/state"), None).await;
    assert_eq!(s["cycle_counter"], 0);
    assert_eq!(s["nominal_params"], json!([0.5, 0.5, 0.5]));
}

#[tokio::test]
async fn disturbance_hidden_by_default() {
    let f = fixture(false);
    let id = new_session(&f, 0).await;
    let (st, v) = call(&f.app, "POST", &format!("/sessions/{id}/disturb"), Some(json!({ "offset": [0.3, 0.0, 0.0] }))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v, json!({}));
    let (_, s) = call(&f.app, "GET", &format!("/sessions/{id}/state"), None).await;
    assert!(s.get("disturbance").is_none());
    assert!(!s.to_string().contains("0.8"));
    let (st, _) = call(&f.app, "POST", &format!("/sessions/{id}/disturb"), Some(json!({ "offset": [0.3, 0.0] }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn debug_flag_exposes_and_reset_clears_disturbance() {
    let f = fixture(true);
    let id = new_session(&f, 0).await;
    let (_, v) = call(&f.app, "POST", &format!("/sessions/{id}/disturb"), Some(json!({ "offset": [0.0, -0.2, 0.0] }))).await;
    assert_eq!(v, json!({ "disturbance": [0.0, -0.2, 0.0] }));
    let (_, s) = call(&f.app, "GET", &format!("/sessions/{id}/state"), None).await;
    assert_eq!(s["disturbance"], json!([0.0, -0.2, 0.0]));
    call(&f.app, "POST", &format!("/sessions/{id}/reset"), None).await;
    let (_, s) = call(&f.app, "GET", &format!("/sessions/{id}/state"), None).await;
    assert_eq!(s["disturbance"], json!([0.0, 0.0, 0.0]));
}

#[tokio::test]
async fn same_seed_sessions_replay_identically() {
    let f = fixture(false);
    let a = new_session(&f, 11).await;
    let b = new_session(&f, 11).await;
    assert_ne!(a, b);
    let (_, sa) = call(&f.app, "GET", &format!("/sessions/{a}/state"), None).await;
    let (_, sb) = call(&f.app, "GET", &format!("/sessions/{b}/state"), None).await;
    assert_eq!(sa["reference_curve"], sb["reference_curve"]);
    for id in [&a, &b] {
        call(&f.app, "POST", &format!("/sessions/{id}/disturb"), Some(json!({ "offset": [0.0, 0.0, 0.3] }))).await;
    }
    for _ in 0..3 {
        let (_, ca) = call(&f.app, "POST", &format!("/sessions/{a}/cycle"), None).await;
        let (_, cb) = call(&f.app, "POST", &format!("/sessions/{b}/cycle"), None).await;
        assert_eq!(ca, cb);
        for id in [&a, &b] {
            call(&f.app, "POST", &format!("/sessions/{id}/adjust"), Some(json!({ "delta": ca["suggested_action"] }))).await;
        }
    }
}

#[tokio::test]
async fn bad_requests() {
    let f = fixture(false);
    let (st, v) = call(&f.app, "GET", "/sessions/nope/state", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert!(v["error"].as_str().unwrap().contains("nope"));
    let (st, _) = call(&f.app, "POST", "/sessions/nope/cycle", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(&f.app, "POST", "/sessions", Some(json!({ "seed": 1 }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = call(&f.app, "POST", "/sessions", Some(json!({ "ckpt": "/does/not/exist.awm", "seed": 1 }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    let bad = f._dir.path().join("bad.awm");
    let mut bytes = std::fs::read(&f.ckpt).unwrap();
    bytes[..20].copy_from_slice(b"{\"magic\":\"XXXX\",\"ten");
    std::fs::write(&bad, bytes).unwrap();
    let (st, v) = call(&f.app, "POST", "/sessions", Some(json!({ "ckpt": bad, "seed": 1 }))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().is_some());
}

#[tokio::test]
async fn default_checkpoint_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.awm");
    WorldModel::new(5).save(&path).unwrap();
    let app = router(AppState::new(ServiceConfig { default_ckpt: Some(path), ..Default::default() }));
    let (st, v) = call(&app, "POST", "/sessions", Some(json!({ "seed": 2 }))).await;
    assert_eq!(st, StatusCode::OK, "{v}");
}
