//! JSON-over-HTTP transport under `/api/v1/`.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use datadock_core::{Platform, UserId};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::ops::{envelope, execute, ApiError, Request};

pub const USER_HEADER: &str = "x-user-id";
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
const IDEMPOTENCY_FILE: &str = "idempotency.jsonl";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Replay {
    key: String,
    request: Value,
    status: u16,
    body: Value,
}

/// Responses remembered per idempotency key, appended to a JSONL log.
#[derive(Debug)]
struct IdempotencyCache {
    path: PathBuf,
    entries: BTreeMap<String, Replay>,
}

impl IdempotencyCache {
    fn open(root: &FsPath) -> anyhow::Result<Self> {
        let path = root.join(IDEMPOTENCY_FILE);
        let mut entries = BTreeMap::new();
        if let Ok(file) = fs::File::open(&path) {
            for line in BufReader::new(file).lines() {
                let line = line?;
                match serde_json::from_str::<Replay>(&line) {
                    Ok(r) => {
                        entries.insert(r.key.clone(), r);
                    }
                    Err(e) => log::warn!("ignoring torn idempotency record: {e}"),
                }
            }
        }
        Ok(Self { path, entries })
    }

    fn remember(&mut self, replay: Replay) -> std::io::Result<()> {
        let mut line = serde_json::to_string(&replay).expect("replay serializes");
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        self.entries.insert(replay.key.clone(), replay);
        Ok(())
    }
}

struct Inner {
    platform: Platform,
    replays: IdempotencyCache,
}

/// Shared service state; every request is serialized through one lock.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Mutex<Inner>>,
}

impl AppState {
    pub fn new(platform: Platform) -> anyhow::Result<Self> {
        let replays = IdempotencyCache::open(platform.root())?;
        Ok(Self {
            inner: Arc::new(Mutex::new(Inner { platform, replays })),
        })
    }

    /// Runs `f` against the platform on the blocking pool.
    pub async fn with_platform<R, F>(&self, f: F) -> R
    where
        F: FnOnce(&mut Platform) -> R + Send + 'static,
        R: Send + 'static,
    {
        let inner = self.inner.clone();
        tokio::task::spawn_blocking(move || {
            let mut g = inner.lock().unwrap_or_else(|p| p.into_inner());
            f(&mut g.platform)
        })
        .await
        .expect("platform task panicked")
    }
}

fn reply(status: u16, body: Value) -> Response {
    let code = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (code, Json(body)).into_response()
}

fn fail(e: ApiError) -> Response {
    let status = e.status;
    reply(status, envelope(&Err(e)))
}

/// Builds a request from the body, path fields and the operation name.
fn build_request(op: &str, wrap: Option<&str>, fields: Vec<(&str, String)>, body: &Bytes) -> Result<Request, ApiError> {
    let parsed: Value = if body.iter().all(u8::is_ascii_whitespace) {
        Value::Object(Map::new())
    } else {
        serde_json::from_slice(body).map_err(|e| ApiError::malformed(format!("malformed JSON: {e}")))?
    };
    let mut obj = match (wrap, parsed) {
        (Some(key), v) => Map::from_iter([(key.to_owned(), v)]),
        (None, Value::Object(m)) => m,
        (None, other) => {
            return Err(ApiError::malformed(format!("expected a JSON object, got {other}")));
        }
    };
    for (k, v) in fields {
        obj.insert(k.to_owned(), Value::String(v));
    }
    obj.insert("op".into(), Value::String(op.to_owned()));
    serde_json::from_value(Value::Object(obj)).map_err(|e| ApiError::malformed(format!("invalid request: {e}")))
}

async fn run(state: AppState, headers: HeaderMap, op: &'static str, wrap: Option<&'static str>, fields: Vec<(&'static str, String)>, body: Bytes) -> Response {
    let mut req = match build_request(op, wrap, fields, &body) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let header = |name: &str| headers.get(name).and_then(|v| v.to_str().ok()).map(str::to_owned);
    if let Some(user) = header(USER_HEADER) {
        req = req.with_user(&UserId::from(user));
    }
    let key = header(IDEMPOTENCY_HEADER).filter(|_| req.is_mutating());

    let inner = state.inner.clone();
    let (status, body) = tokio::task::spawn_blocking(move || {
        let mut g = inner.lock().unwrap_or_else(|p| p.into_inner());
        let fingerprint = serde_json::to_value(&req).expect("request serializes");
        if let Some(key) = &key {
            if let Some(prev) = g.replays.entries.get(key) {
                if prev.request == fingerprint {
                    return (prev.status, prev.body.clone());
                }
                let e = ApiError::new(409, "conflict", format!("idempotency key {key} was used for a different request"));
                return (409, envelope(&Err(e)));
            }
        }
        let result = execute(&mut g.platform, req).map_err(ApiError::from);
        let status = result.as_ref().map_or_else(|e| e.status, |_| 200);
        let body = envelope(&result);
        if let Some(key) = key {
            let replay = Replay { key, request: fingerprint, status, body: body.clone() };
            if let Err(e) = g.replays.remember(replay) {
                log::error!("could not persist idempotency record: {e}");
            }
        }
        (status, body)
    })
    .await
    .expect("request task panicked");
    reply(status, body)
}

macro_rules! op {
    ($op:literal) => {
        |State(s): State<AppState>, h: HeaderMap, b: Bytes| run(s, h, $op, None, vec![], b)
    };
    ($op:literal, wrap $key:literal) => {
        |State(s): State<AppState>, h: HeaderMap, b: Bytes| run(s, h, $op, Some($key), vec![], b)
    };
    ($op:literal, id) => {
        |State(s): State<AppState>, Path(id): Path<String>, h: HeaderMap, b: Bytes| {
            run(s, h, $op, None, vec![("id", id)], b)
        }
    };
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/project", post(op!("project_create")).get(op!("project_list")))
        .route("/api/v1/datatype", post(op!("datatype_register")).get(op!("datatype_list")))
        .route("/api/v1/object", post(op!("data_upload")))
        .route("/api/v1/object/query", post(op!("data_query")))
        .route("/api/v1/object/:id", get(op!("data_get", id)))
        .route("/api/v1/object/:id/fetch", post(op!("data_fetch", id)))
        .route("/api/v1/object/:id/provenance", get(op!("provenance", id)))
        .route("/api/v1/object/:id/reproduce", get(op!("reproduce", id)))
        .route("/api/v1/app", post(op!("app_register")).get(op!("app_list")))
        .route("/api/v1/task", post(op!("task_submit")))
        .route("/api/v1/task/:id", get(op!("task_status", id)))
        .route("/api/v1/task/:id/stop", post(op!("task_stop", id)))
        .route("/api/v1/task/:id/events", get(op!("task_events", id)))
        .route("/api/v1/tick", post(op!("tick")))
        .route("/api/v1/rule", post(op!("rule_define", wrap "rule")))
        .route("/api/v1/rule/run", post(op!("rule_run")))
        .route("/api/v1/rule/:id/rearm", post(op!("rule_rearm", id)))
        .route("/api/v1/resource", post(op!("resource_register", wrap "resource")).get(op!("resource_list")))
        .route("/api/v1/resource/:id/enable", post(op!("resource_enable", id)))
        .route("/api/v1/reference", post(op!("reference_build")))
        .route("/api/v1/reference/classify", post(op!("reference_classify")))
        .route("/api/v1/collate", post(op!("collate")))
        .route("/api/v1/publication", post(op!("pub_create")))
        .route("/api/v1/sim", post(op!("sim_run")))
        .fallback(|| async { fail(ApiError::new(404, "not_found", "no such endpoint")) })
        .with_state(state)
}

/// Advances the logical clock every `tick_ms` until the process exits.
pub fn spawn_scheduler(state: AppState, tick_ms: u64) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(Duration::from_millis(tick_ms.max(1)));
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            interval.tick().await;
            if let Err(e) = state.with_platform(|p| p.tick()).await {
                log::error!("scheduler tick failed: {e}");
            }
        }
    })
}

/// Binds `addr`, starts the scheduler loop and serves until ctrl-c.
pub async fn serve(platform: Platform, addr: SocketAddr) -> anyhow::Result<()> {
    let tick_ms = platform.config().tick_ms;
    let state = AppState::new(platform)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    log::info!("listening on {}", listener.local_addr()?);
    let scheduler = spawn_scheduler(state.clone(), tick_ms);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    scheduler.abort();
    Ok(())
}
