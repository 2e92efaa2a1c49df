mod common;

use std::path::Path;
use std::process::Command;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use datadock_cli::server::{router, AppState, IDEMPOTENCY_HEADER, USER_HEADER};
use datadock_core::{Platform, PlatformConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use common::{Fixtures, BLOB};

fn app(root: &Path) -> Router {
    let platform = Platform::open(root, PlatformConfig::default()).unwrap();
    router(AppState::new(platform).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>, key: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri).header(USER_HEADER, "alice");
    if let Some(k) = key {
        req = req.header(IDEMPOTENCY_HEADER, k);
    }
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(Body::from(body.unwrap_or("").to_owned())).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn ok(app: &Router, method: &str, uri: &str, body: Value) -> Value {
    let text = (!body.is_null()).then(|| body.to_string());
    let (status, v) = call(app, method, uri, text.as_deref(), None).await;
    assert_eq!(status, StatusCode::OK, "{uri}: {v}");
    assert_eq!(v["ok"], true);
    v["data"].clone()
}

fn cli(root: &Path, args: &[&str]) -> Value {
    let out = Command::new(env!("CARGO_BIN_EXE_datadock"))
        .arg("--root")
        .arg(root)
        .args(["--user", "alice", "--json"])
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[tokio::test]
async fn http_and_cli_leave_identical_stores() {
    let fx = Fixtures::new();
    let raw = fx.upload_dir("raw", "blob.txt", "raw bytes\n");
    let service = fx.service("step");

    let a = tempfile::tempdir().unwrap();
    cli(a.path(), &["datatype", "register", "--name", BLOB, "--file", "blob.txt"]);
    cli(a.path(), &["project", "create", "--name", "study"]);
    cli(a.path(), &["data", "upload", "--project", "p00000001", "--datatype", BLOB, "--dir", raw.to_str().unwrap(), "--subject", "sub-1", "--tag", "raw"]);
    cli(a.path(), &["app", "register", service.to_str().unwrap()]);
    let resource = fx.resource_file("r1", &"a00000001".into());
    cli(a.path(), &["resource", "register", resource.to_str().unwrap()]);
    cli(a.path(), &["task", "submit", "--app", "a00000001", "--project", "p00000001", "--stage", "d00000001", "--output-tag", "done"]);
    cli(a.path(), &["tick", "--count", "6"]);

    let b = tempfile::tempdir().unwrap();
    let http = app(b.path());
    ok(&http, "POST", "/api/v1/datatype", json!({ "name": BLOB, "file_spec": [{ "pattern": "blob.txt", "required": true }] })).await;
    ok(&http, "POST", "/api/v1/project", json!({ "name": "study" })).await;
    ok(&http, "POST", "/api/v1/object", json!({
        "project": "p00000001", "datatype": BLOB, "source_dir": raw, "subject": "sub-1", "tags": ["raw"]
    }))
    .await;
    ok(&http, "POST", "/api/v1/app", json!({ "service_dir": service })).await;
    ok(&http, "POST", "/api/v1/resource", serde_json::to_value(fx.resource("r1", &"a00000001".into())).unwrap()).await;
    ok(&http, "POST", "/api/v1/task", json!({
        "app": "a00000001", "project": "p00000001", "staged": ["d00000001"], "output_tags": ["done"]
    }))
    .await;
    ok(&http, "POST", "/api/v1/tick", json!({ "count": 6 })).await;

    let query = json!({ "project": "p00000001" });
    let over_http = ok(&http, "POST", "/api/v1/object/query", query).await;
    let over_cli = cli(a.path(), &["data", "query", "--project", "p00000001"]);
    assert_eq!(over_http.as_array().unwrap().len(), 2);
    assert_eq!(over_http, over_cli);

    let events = ok(&http, "GET", "/api/v1/task/t00000001/events", Value::Null).await;
    assert_eq!(events.as_array().unwrap().len(), 3);
    assert_eq!(events, cli(a.path(), &["task", "events", "t00000001"]));
    let script = ok(&http, "GET", "/api/v1/object/d00000002/reproduce", Value::Null).await;
    assert_eq!(script, cli(a.path(), &["reproduce", "d00000002"]));
}

#[tokio::test]
async fn errors_map_onto_http_statuses() {
    let root = tempfile::tempdir().unwrap();
    let http = app(root.path());
    let (status, v) = call(&http, "GET", "/api/v1/object/d00000042", None, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!((v["ok"].clone(), v["error"]["kind"].clone()), (json!(false), json!("not_found")));

    let (status, v) = call(&http, "POST", "/api/v1/project", Some("{not json"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["kind"], "malformed_request");

    let (status, _) = call(&http, "POST", "/api/v1/project", Some(r#"{"name": "x", "colour": "red"}"#), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, v) = call(&http, "POST", "/api/v1/datatype", Some(r#"{"name": "x/y", "file_spec": []}"#), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["kind"], "validation");

    let (status, v) = call(&http, "POST", "/api/v1/task/t00000001/stop", None, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND, "{v}");
}

#[tokio::test]
async fn idempotency_keys_replay_and_survive_restarts() {
    let root = tempfile::tempdir().unwrap();
    let body = r#"{"name": "study"}"#;
    let first = {
        let http = app(root.path());
        let first = call(&http, "POST", "/api/v1/project", Some(body), Some("k1")).await;
        assert_eq!(first.0, StatusCode::OK);
        assert_eq!(call(&http, "POST", "/api/v1/project", Some(body), Some("k1")).await, first);
        let (status, v) = call(&http, "POST", "/api/v1/project", Some(r#"{"name": "other"}"#), Some("k1")).await;
        assert_eq!(status, StatusCode::CONFLICT);
        assert_eq!(v["error"]["kind"], "conflict");
        first
    };
    let http = app(root.path());
    assert_eq!(call(&http, "POST", "/api/v1/project", Some(body), Some("k1")).await, first);
    let (_, listed) = call(&http, "GET", "/api/v1/project", None, None).await;
    assert_eq!(listed["data"].as_array().unwrap().len(), 1);

    let (_, fresh) = call(&http, "POST", "/api/v1/project", Some(body), Some("k2")).await;
    assert_ne!(fresh["data"]["id"], first.1["data"]["id"]);
}
