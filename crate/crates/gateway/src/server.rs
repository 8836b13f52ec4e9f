//! HTTP surface: JSON-RPC for agents, the approval API for humans and
//! the conformance harness, and read-only receipt, key and event feeds.

use crate::clock::HttpClock;
use crate::rpc::{self, Request, Response, RpcError};
use crate::upstream::HttpForwarder;
use aarm_core::ledger::ChainStatus;
use aarm_core::model::{DecisionKind, Identity, Params};
use aarm_core::orchestrator::{CallOutcome, CallRequest, Engine, EngineError, InitRequest, PendingItem, PendingStatus};
use aarm_core::receipt::{ReceiptFilter, Verdict, KEYS_FILE, RECEIPTS_FILE};
use aarm_core::telemetry::{EventFilter, EventKind};
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response as HttpResponse};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

pub struct AppState {
    pub engine: Arc<Engine>,
    pub forwarder: Arc<HttpForwarder>,
    pub test_clock: Option<Arc<HttpClock>>,
    pub data_dir: PathBuf,
    pub hold: Duration,
}

impl AppState {
    async fn tick(&self) {
        if let Some(c) = &self.test_clock {
            c.refresh().await;
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/", post(rpc_endpoint))
        .route("/rpc", post(rpc_endpoint))
        .route("/healthz", get(health))
        .route("/v1/pending", get(list_pending))
        .route("/v1/pending/{item_id}", get(get_pending))
        .route("/v1/pending/{item_id}/decision", post(decide))
        .route("/v1/receipts", get(list_receipts))
        .route("/v1/keys", get(keys))
        .route("/keys.json", get(keys))
        .route("/receipts.jsonl", get(raw_receipts))
        .route("/v1/sessions", get(sessions))
        .route("/v1/sessions/{session_id}/verify", get(verify))
        .route("/v1/events", get(events))
        .with_state(state)
}

fn engine_error(e: EngineError) -> RpcError {
    let msg = e.to_string();
    match e {
        EngineError::UnknownSession(_) => RpcError::new(rpc::UNKNOWN_SESSION, msg),
        EngineError::IdentityRequired(missing) => RpcError::new(rpc::IDENTITY_REQUIRED, msg).with_data(json!({"missing": missing})),
        EngineError::ForeignItem => RpcError::new(rpc::FORBIDDEN, msg),
        EngineError::FailClosed(_) => RpcError::new(rpc::DENY, msg).with_data(json!({"fail_closed": true})),
        EngineError::SessionExists(_) | EngineError::InvalidRequest(_) | EngineError::NotFound(_) => {
            RpcError::new(rpc::INVALID_PARAMS, msg)
        }
        _ => RpcError::new(rpc::INTERNAL_ERROR, msg),
    }
}

fn params<T: serde::de::DeserializeOwned>(p: Option<Value>) -> Result<T, RpcError> {
    serde_json::from_value(p.unwrap_or_else(|| json!({}))).map_err(|e| RpcError::new(rpc::INVALID_PARAMS, e.to_string()))
}

#[derive(Deserialize)]
struct InitParams {
    session_id: String,
    #[serde(default)]
    original_request: Option<String>,
    #[serde(default)]
    identity: Identity,
}

#[derive(Deserialize)]
struct CallParams {
    session_id: String,
    #[serde(default)]
    tool: Option<String>,
    #[serde(default)]
    operation: Option<String>,
    /// MCP style `tool.operation`.
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    parameters: Option<Params>,
    #[serde(default)]
    arguments: Option<Params>,
    #[serde(default)]
    identity: Option<Identity>,
}

#[derive(Deserialize)]
struct StatusParams {
    session_id: String,
    item_id: String,
}

#[derive(Deserialize)]
struct IntentParams {
    session_id: String,
    original_request: String,
}

/// The reply a terminal item gives the agent that submitted it.
pub fn terminal_reply(item: &PendingItem) -> Result<Value, RpcError> {
    let Some(res) = &item.result else {
        return Err(RpcError::new(rpc::INTERNAL_ERROR, "terminal item without a result"));
    };
    let base = json!({
        "item_id": item.item_id,
        "status": item.status,
        "receipt_id": res.receipt_id,
        "resolution": res.resolution_method,
    });
    match item.status {
        PendingStatus::ResolvedAllow => {
            let mut v = base;
            v["decision"] = json!(DecisionKind::Allow);
            match (&res.output, &res.error) {
                (Some(out), _) => v["output"] = out.clone(),
                (None, err) => {
                    v["isError"] = json!(true);
                    v["error"] = json!(err.clone().unwrap_or_default());
                }
            }
            Ok(v)
        }
        _ => Err(RpcError::new(rpc::DENY, res.reason.clone()).with_data(base)),
    }
}

fn parked_reply(item: &PendingItem) -> RpcError {
    let code = if item.kind == DecisionKind::StepUp { rpc::STEP_UP_PARKED } else { rpc::DEFER_PARKED };
    RpcError::new(code, item.reason.clone()).with_data(json!({
        "item_id": item.item_id,
        "receipt_id": item.receipt_id,
        "seq": item.action.seq,
        "kind": item.kind,
        "deadline": item.deadline,
        "defer_reason": item.defer_reason,
        "status": item.status,
    }))
}

async fn tools_call(st: &AppState, p: CallParams) -> Result<Value, RpcError> {
    let (tool, operation) = match (p.tool, p.operation, p.name) {
        (Some(t), Some(o), _) => (t, o),
        (None, None, Some(n)) => match n.split_once('.') {
            Some((t, o)) => (t.to_owned(), o.to_owned()),
            None => (n, String::new()),
        },
        _ => return Err(RpcError::new(rpc::INVALID_PARAMS, "give tool and operation, or name")),
    };
    let parameters = p.parameters.or(p.arguments).unwrap_or_default();
    let req = CallRequest { session_id: p.session_id, tool, operation, parameters, identity: p.identity };
    match st.engine.call(req).await.map_err(engine_error)? {
        CallOutcome::Executed { receipt_id, seq, decision, output } => {
            Ok(json!({"receipt_id": receipt_id, "seq": seq, "decision": decision, "output": output}))
        }
        CallOutcome::ExecutedWithError { receipt_id, seq, decision, error } => {
            Ok(json!({"receipt_id": receipt_id, "seq": seq, "decision": decision, "isError": true, "error": error}))
        }
        CallOutcome::Blocked { receipt_id, seq, reason, matched_policies } => Err(RpcError::new(rpc::DENY, reason)
            .with_data(json!({"receipt_id": receipt_id, "seq": seq, "matched_policies": matched_policies}))),
        CallOutcome::Parked { item_id, .. } => {
            let item = st
                .engine
                .wait_terminal(&item_id, st.hold)
                .await
                .ok_or_else(|| RpcError::new(rpc::INTERNAL_ERROR, "parked item vanished"))?;
            if item.status.is_terminal() {
                terminal_reply(&item)
            } else {
                Err(parked_reply(&item))
            }
        }
    }
}

async fn dispatch(st: &AppState, req: Request) -> Result<Value, RpcError> {
    if req.jsonrpc != "2.0" {
        return Err(RpcError::new(rpc::INVALID_REQUEST, "jsonrpc must be \"2.0\""));
    }
    match req.method.as_str() {
        "session/initialize" => {
            let p: InitParams = params(req.params)?;
            let out = st
                .engine
                .initialize(InitRequest { session_id: p.session_id, original_request: p.original_request, identity: p.identity })
                .await
                .map_err(engine_error)?;
            Ok(json!(out))
        }
        "session/set_intent" => {
            let p: IntentParams = params(req.params)?;
            let resolved = st.engine.set_intent(&p.session_id, &p.original_request).await.map_err(engine_error)?;
            let resolved: Vec<Value> =
                resolved.iter().map(|(id, d)| json!({"item_id": id, "decision": d.kind(), "reason": d.reason()})).collect();
            Ok(json!({"session_id": p.session_id, "resolved": resolved}))
        }
        "tools/call" => tools_call(st, params(req.params)?).await,
        "pending/status" => {
            let p: StatusParams = params(req.params)?;
            let item = st.engine.pending_status(&p.session_id, &p.item_id).await.map_err(engine_error)?;
            if item.status.is_terminal() {
                terminal_reply(&item)
            } else {
                Ok(json!({"item_id": item.item_id, "status": item.status, "kind": item.kind, "deadline": item.deadline}))
            }
        }
        "tools/list" => Ok(json!({"tools": st.forwarder.list_tools().await})),
        other => Err(RpcError::new(rpc::METHOD_NOT_FOUND, format!("method {other:?} not found"))),
    }
}

async fn rpc_endpoint(State(st): State<Arc<AppState>>, body: Bytes) -> Json<Response> {
    st.tick().await;
    let req: Request = match serde_json::from_slice::<Value>(&body) {
        Err(e) => return Json(Response::err(Value::Null, RpcError::new(rpc::PARSE_ERROR, e.to_string()))),
        Ok(v) => match serde_json::from_value(v) {
            Ok(r) => r,
            Err(e) => return Json(Response::err(Value::Null, RpcError::new(rpc::INVALID_REQUEST, e.to_string()))),
        },
    };
    let id = req.id.clone().unwrap_or(Value::Null);
    Json(match dispatch(&st, req).await {
        Ok(v) => Response::ok(id, v),
        Err(e) => Response::err(id, e),
    })
}

fn http_error(status: StatusCode, message: impl Into<String>) -> HttpResponse {
    (status, Json(json!({"error": message.into()}))).into_response()
}

fn approval_error(e: EngineError) -> HttpResponse {
    let status = match &e {
        EngineError::NotAuthorized => StatusCode::FORBIDDEN,
        EngineError::NotFound(_) | EngineError::UnknownSession(_) => StatusCode::NOT_FOUND,
        EngineError::Conflict { .. } | EngineError::DependencyPending { .. } => StatusCode::CONFLICT,
        EngineError::ForeignItem => StatusCode::FORBIDDEN,
        EngineError::FailClosed(_) => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::BAD_REQUEST,
    };
    http_error(status, e.to_string())
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({"status": "ok", "policy_set_digest": st.engine.policies().digest()}))
}

#[derive(Deserialize)]
struct PendingQuery {
    session_id: Option<String>,
    /// `all` includes resolved and timed-out items.
    status: Option<String>,
}

async fn list_pending(State(st): State<Arc<AppState>>, Query(q): Query<PendingQuery>) -> HttpResponse {
    st.tick().await;
    let all = match q.status.as_deref() {
        None | Some("pending") => false,
        Some("all") => true,
        Some(other) => return http_error(StatusCode::BAD_REQUEST, format!("status must be pending or all, not {other:?}")),
    };
    match st.engine.pending(q.session_id.as_deref(), all).await {
        Ok(items) => Json(items).into_response(),
        Err(e) => approval_error(e),
    }
}

async fn get_pending(State(st): State<Arc<AppState>>, Path(item_id): Path<String>) -> HttpResponse {
    st.tick().await;
    st.engine.expire_timeouts(st.engine.clock().now()).await;
    match st.engine.item(&item_id).await {
        Some(item) => Json(item).into_response(),
        None => http_error(StatusCode::NOT_FOUND, format!("no pending item {item_id:?}")),
    }
}

#[derive(Deserialize)]
struct DecisionBody {
    verdict: String,
    #[serde(default)]
    note: Option<String>,
    #[serde(default)]
    approver_token: Option<String>,
}

async fn decide(
    State(st): State<Arc<AppState>>,
    Path(item_id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> HttpResponse {
    st.tick().await;
    let body: DecisionBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return http_error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let Some(verdict) = Verdict::parse(&body.verdict) else {
        return http_error(StatusCode::BAD_REQUEST, "verdict must be ALLOW or DENY");
    };
    let bearer = headers
        .get(header::AUTHORIZATION)
        .and_then(|h| h.to_str().ok())
        .and_then(|h| h.strip_prefix("Bearer "))
        .map(str::to_owned);
    let token = body.approver_token.or(bearer).unwrap_or_default();
    match st.engine.submit_approval(&item_id, &token, verdict, body.note).await {
        Ok(item) => Json(item).into_response(),
        Err(e) => approval_error(e),
    }
}

#[derive(Deserialize)]
struct ReceiptQuery {
    session_id: Option<String>,
    /// Comma-separated decision kinds.
    kind: Option<String>,
    from: Option<String>,
    to: Option<String>,
    tool: Option<String>,
}

async fn list_receipts(State(st): State<Arc<AppState>>, Query(q): Query<ReceiptQuery>) -> HttpResponse {
    let kinds = match q.kind.as_deref().map(|k| k.split(',').map(|s| DecisionKind::parse(s.trim())).collect::<Option<Vec<_>>>()) {
        None => None,
        Some(Some(k)) => Some(k),
        Some(None) => return http_error(StatusCode::BAD_REQUEST, "unknown decision kind"),
    };
    let filter = ReceiptFilter { session_id: q.session_id, kinds, from: q.from, to: q.to, tool: q.tool };
    match st.engine.vault().query(&filter) {
        Ok(r) => Json(r).into_response(),
        Err(e) => http_error(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

async fn file(path: PathBuf, content_type: &'static str) -> HttpResponse {
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type)], bytes).into_response(),
        Err(e) => http_error(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())),
    }
}

async fn keys(State(st): State<Arc<AppState>>) -> HttpResponse {
    file(st.data_dir.join(KEYS_FILE), "application/json").await
}

/// The receipt log exactly as stored, for offline verification.
async fn raw_receipts(State(st): State<Arc<AppState>>) -> HttpResponse {
    file(st.data_dir.join(RECEIPTS_FILE), "application/x-ndjson").await
}

async fn sessions(State(st): State<Arc<AppState>>) -> Json<Vec<String>> {
    Json(st.engine.session_ids())
}

async fn verify(State(st): State<Arc<AppState>>, Path(session_id): Path<String>) -> HttpResponse {
    if !st.engine.ledger().contains(&session_id) {
        return http_error(StatusCode::NOT_FOUND, format!("unknown session {session_id:?}"));
    }
    Json(match st.engine.verify_chain(&session_id) {
        ChainStatus::Ok { entries } => json!({"session_id": session_id, "status": "ok", "entries": entries}),
        ChainStatus::Corrupt { seq, reason } => {
            json!({"session_id": session_id, "status": "corrupt", "seq": seq, "reason": reason})
        }
    })
    .into_response()
}

#[derive(Deserialize)]
struct EventQuery {
    session_id: Option<String>,
    /// Comma-separated event kinds.
    kind: Option<String>,
}

/// Batch export of recorded telemetry.
async fn events(State(st): State<Arc<AppState>>, Query(q): Query<EventQuery>) -> HttpResponse {
    let kinds = match q.kind.as_deref() {
        None => Vec::new(),
        Some(k) => match k.split(',').map(|s| serde_json::from_value::<EventKind>(json!(s.trim()))).collect() {
            Ok(v) => v,
            Err(_) => return http_error(StatusCode::BAD_REQUEST, "unknown event kind"),
        },
    };
    let filter = EventFilter { kinds, sessions: q.session_id.into_iter().collect(), ..Default::default() };
    Json(st.engine.telemetry().events(&filter)).into_response()
}
