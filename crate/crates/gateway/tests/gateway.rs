use aarm_core::clock::ManualClock;
use aarm_core::orchestrator::Engine;
use aarm_core::receipt::{verify_receipts_text, PublicKeys};
use aarm_gateway::clock::manual_clock_router;
use aarm_gateway::mock::MockUpstream;
use aarm_gateway::rpc;
use aarm_gateway::{Gateway, GatewayConfig, ServeOptions};
use axum::Router;
use chrono::{DateTime, Duration, Utc};
use serde_json::{json, Value};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use tempfile::TempDir;

const TOKEN: &str = "tok-secops";

fn policies() -> Value {
    json!({
        "version": 1,
        "named_lists": {"internal_domains": ["company.com"]},
        "policies": [
            {"id": "block_drop_database", "match": ["MATCHES", "action.params.sql", "(?i)DROP\\s+DATABASE"],
             "decision": "DENY", "priority": 1000, "forbidden": true, "reason": "Forbidden: DROP DATABASE"},
            {"id": "block_external_after_pii",
             "match": ["AND", ["==", "action.tool", "email"], ["NOT_IN", "action.params.to", "@internal_domains"],
                       ["CONTAINS", "context.data_classification", "PII"]],
             "decision": "DENY", "priority": 100, "reason": "External email after PII access"},
            {"id": "allow_email", "match": ["==", "action.tool", "email"], "decision": "ALLOW", "priority": 10},
            {"id": "allow_db", "match": ["==", "action.tool", "db"], "decision": "ALLOW", "priority": 10},
            {"id": "allow_web", "match": ["==", "action.tool", "web"], "decision": "ALLOW", "priority": 10},
            {"id": "allow_down", "match": ["==", "action.tool", "down"], "decision": "ALLOW", "priority": 10},
            {"id": "cap_search", "match": ["AND", ["==", "action.tool", "web"], ["==", "action.operation", "search"]],
             "decision": "MODIFY", "priority": 20, "transform": [{"path": "limit", "value": 10}]},
            {"id": "deploy_step_up", "match": ["==", "action.tool", "deploy"], "decision": "ALLOW", "step_up": true,
             "priority": 10, "reason": "deploys need approval"},
            {"id": "rotation_needs_intent", "match": ["AND", ["==", "action.tool", "secrets"], [">=", "context.confidence", 0.5]],
             "decision": "ALLOW", "priority": 10}
        ]
    })
}

fn start_time() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339("2025-01-15T10:00:00Z").unwrap().with_timezone(&Utc)
}

async fn spawn(router: Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
    format!("http://{addr}")
}

struct Env {
    dir: TempDir,
    url: String,
    mock: Arc<MockUpstream>,
    clock: Arc<ManualClock>,
    engine: Arc<Engine>,
    http: reqwest::Client,
    next_id: AtomicU64,
}

struct Setup {
    hold: f64,
    console: bool,
}

impl Default for Setup {
    fn default() -> Self {
        Setup { hold: 0.2, console: false }
    }
}

async fn env_with(setup: Setup) -> Env {
    let dir = TempDir::new().unwrap();
    let mock = MockUpstream::create(&dir.path().join("mock")).unwrap();
    let mock_url = spawn(mock.router()).await;
    let clock = Arc::new(ManualClock::new(start_time()));
    let clock_url = spawn(manual_clock_router(clock.clone())).await;
    std::fs::write(dir.path().join("policies.json"), policies().to_string()).unwrap();
    std::fs::create_dir_all(dir.path().join("console")).unwrap();
    std::fs::write(dir.path().join("console/index.html"), "<title>approvals</title>").unwrap();
    let tools: serde_json::Map<String, Value> = ["email", "db", "web", "deploy", "secrets"]
        .iter()
        .map(|t| (t.to_string(), json!(format!("{mock_url}/rpc"))))
        .chain([("down".to_string(), json!("http://127.0.0.1:9/rpc"))])
        .collect();
    let config = json!({
        "policy_file": "policies.json",
        "data_dir": "data",
        "tools": tools,
        "approvers": {TOKEN: "secops@company.com"},
        "timeouts": {"hold_secs": setup.hold, "upstream_secs": 2.0},
        "telemetry": {"file": "events.jsonl"},
        "console_dir": "console"
    });
    let config = GatewayConfig::parse(&config.to_string(), dir.path()).unwrap();
    let opts = ServeOptions { test_clock: Some(format!("{clock_url}/now")), seed: Some(11), console: setup.console, console_dir: None };
    let gw = Gateway::build(config, opts).await.unwrap();
    let engine = gw.engine().clone();
    let url = spawn(gw.router()).await;
    Env { dir, url, mock, clock, engine, http: reqwest::Client::new(), next_id: AtomicU64::new(1) }
}

async fn env() -> Env {
    env_with(Setup::default()).await
}

fn identity(session: &str) -> Value {
    json!({
        "human_principal": "alice@company.com",
        "service_identity": "agent-svc@iam",
        "agent_identity": "assistant-v1",
        "session_id": session,
        "privilege_scope": ["crm:read"]
    })
}

impl Env {
    async fn rpc(&self, method: &str, params: Value) -> rpc::Response {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let resp = self.http.post(format!("{}/rpc", self.url)).json(&rpc::request(id, method, params)).send().await.unwrap();
        resp.json().await.unwrap()
    }

    async fn init(&self, session: &str, request: Option<&str>) {
        let r = self
            .rpc("session/initialize", json!({"session_id": session, "original_request": request, "identity": identity(session)}))
            .await;
        assert!(r.error.is_none(), "{r:?}");
    }

    async fn call(&self, session: &str, tool: &str, op: &str, params: Value) -> rpc::Response {
        self.rpc("tools/call", json!({"session_id": session, "tool": tool, "operation": op, "parameters": params})).await
    }

    async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.http.get(format!("{}{path}", self.url)).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap_or(Value::Null))
    }

    async fn decide(&self, item: &str, verdict: &str, token: &str) -> (u16, Value) {
        let r = self
            .http
            .post(format!("{}/v1/pending/{item}/decision", self.url))
            .json(&json!({"verdict": verdict, "note": "checked", "approver_token": token}))
            .send()
            .await
            .unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    fn upstream(&self) -> Vec<String> {
        self.mock.calls().iter().map(|c| format!("{}.{}", c["tool"].as_str().unwrap(), c["operation"].as_str().unwrap())).collect()
    }
}

fn error(r: &rpc::Response) -> &rpc::RpcError {
    r.error.as_ref().unwrap_or_else(|| panic!("expected an error, got {r:?}"))
}

fn data(r: &rpc::Response, key: &str) -> String {
    error(r).data.as_ref().unwrap()[key].as_str().unwrap().to_owned()
}

#[tokio::test]
async fn external_email_after_pii_is_denied_internal_allowed() {
    let e = env().await;
    e.init("s1", Some("Summarize Q3 sales for leadership")).await;
    let q = e.call("s1", "db", "query", json!({"sql": "SELECT * FROM customers"})).await;
    assert_eq!(q.result.as_ref().unwrap()["output"]["_classification"], "PII");
    let denied = e.call("s1", "email", "send", json!({"to": "analyst@partner.com", "body": "data"})).await;
    assert_eq!(error(&denied).code, rpc::DENY);
    assert_eq!(error(&denied).message, "External email after PII access");
    assert_eq!(error(&denied).data.as_ref().unwrap()["matched_policies"][0], "block_external_after_pii");
    assert_eq!(e.upstream(), ["db.query"]);
    let ok = e.call("s1", "email", "send", json!({"to": "bob@company.com", "body": "data"})).await;
    assert_eq!(ok.result.unwrap()["decision"], "ALLOW");
    assert_eq!(e.upstream(), ["db.query", "email.send"]);
    let log = std::fs::read_to_string(e.mock.path()).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[tokio::test]
async fn protocol_errors_use_fixed_codes() {
    let e = env().await;
    e.init("s1", None).await;
    let unknown = e.call("s1", "ghost", "run", json!({})).await;
    assert_eq!((error(&unknown).code, error(&unknown).message.as_str()), (rpc::DENY, "unknown tool"));
    assert!(error(&unknown).data.as_ref().unwrap()["receipt_id"].is_string());
    assert_eq!(error(&e.call("nope", "db", "query", json!({})).await).code, rpc::UNKNOWN_SESSION);
    let mut id = identity("s2");
    id["agent_identity"] = json!("");
    let r = e.rpc("session/initialize", json!({"session_id": "s2", "identity": id})).await;
    assert_eq!(error(&r).code, rpc::IDENTITY_REQUIRED);
    assert_eq!(error(&e.rpc("bogus/method", json!({})).await).code, rpc::METHOD_NOT_FOUND);
    let raw = e.http.post(format!("{}/rpc", e.url)).body("{not json").send().await.unwrap();
    let raw: rpc::Response = raw.json().await.unwrap();
    assert_eq!(error(&raw).code, rpc::PARSE_ERROR);
    let forbidden = e.call("s1", "db", "query", json!({"sql": "drop database prod"})).await;
    assert_eq!(error(&forbidden).message, "Forbidden: DROP DATABASE");
    assert!(e.upstream().is_empty());
}

#[tokio::test]
async fn modify_forwards_transformed_parameters() {
    let e = env().await;
    e.init("s1", None).await;
    let r = e.call("s1", "web", "search", json!({"q": "rust", "limit": 500})).await;
    assert_eq!(r.result.unwrap()["decision"], "MODIFY");
    assert_eq!(e.mock.calls()[0]["parameters"], json!({"q": "rust", "limit": 10}));
}

#[tokio::test]
async fn mcp_style_name_and_arguments_are_accepted() {
    let e = env().await;
    e.init("s1", None).await;
    let r = e.rpc("tools/call", json!({"session_id": "s1", "name": "web.fetch", "arguments": {"url": "https://example.com"}})).await;
    assert_eq!(r.result.unwrap()["decision"], "ALLOW");
    assert_eq!(e.upstream(), ["web.fetch"]);
}

#[tokio::test]
async fn unreachable_upstream_after_allow_is_an_execution_error() {
    let e = env().await;
    e.init("s1", None).await;
    let r = e.call("s1", "down", "ping", json!({})).await;
    let result = r.result.unwrap();
    assert_eq!(result["isError"], true);
    assert!(result["error"].as_str().unwrap().contains("unreachable"));
    let (_, receipts) = e.get("/v1/receipts?session_id=s1").await;
    assert_eq!(receipts[0]["outcome"]["status"], "EXECUTED_WITH_ERROR");
}

#[tokio::test]
async fn step_up_approved_within_hold_returns_the_result() {
    let e = Arc::new(env_with(Setup { hold: 10.0, ..Setup::default() }).await);
    e.init("s1", None).await;
    let held = {
        let e = e.clone();
        tokio::spawn(async move { e.call("s1", "deploy", "release", json!({"version": "1.2.0"})).await })
    };
    let item = loop {
        let (_, items) = e.get("/v1/pending?session_id=s1").await;
        if let Some(i) = items.as_array().and_then(|a| a.first()) {
            break i.clone();
        }
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
    };
    assert_eq!(item["kind"], "STEP_UP");
    assert_eq!(item["action"]["parameters"]["version"], "1.2.0");
    assert!(e.upstream().is_empty());
    let (status, resolved) = e.decide(item["item_id"].as_str().unwrap(), "ALLOW", TOKEN).await;
    assert_eq!(status, 200);
    assert_eq!(resolved["status"], "RESOLVED_ALLOW");
    let r = held.await.unwrap();
    let result = r.result.unwrap_or_else(|| panic!("{:?}", r.error));
    assert_eq!(result["status"], "RESOLVED_ALLOW");
    assert_eq!(result["resolution"], "human_allow");
    assert_eq!(result["output"]["ok"], true);
    assert_eq!(e.upstream(), ["deploy.release"]);
}

#[tokio::test]
async fn parked_call_polls_to_timeout_denial() {
    let e = env().await;
    e.init("s1", None).await;
    e.init("s2", None).await;
    let r = e.call("s1", "secrets", "rotate", json!({"key": "db-password"})).await;
    assert_eq!(error(&r).code, rpc::DEFER_PARKED);
    let item = data(&r, "item_id");
    assert_eq!(data(&r, "deadline"), "2025-01-15T10:02:00.000Z");
    let p = e.rpc("pending/status", json!({"session_id": "s1", "item_id": item})).await;
    assert_eq!(p.result.as_ref().unwrap()["status"], "PENDING");
    assert_eq!(p.result.unwrap()["deadline"], "2025-01-15T10:02:00.000Z");
    let foreign = e.rpc("pending/status", json!({"session_id": "s2", "item_id": item})).await;
    assert_eq!(error(&foreign).code, rpc::FORBIDDEN);
    e.clock.advance(Duration::seconds(121));
    let done = e.rpc("pending/status", json!({"session_id": "s1", "item_id": item})).await;
    assert_eq!(error(&done).code, rpc::DENY);
    let d = error(&done).data.clone().unwrap();
    assert_eq!(d["resolution"], "timeout");
    let (_, follow) = e.get("/v1/receipts?session_id=s1&kind=DENY").await;
    assert_eq!(follow[0]["receipt_id"], d["receipt_id"]);
    assert_eq!(follow[0]["deferral"]["resolution_method"], "timeout");
    assert!(e.upstream().is_empty());
}

#[tokio::test]
async fn step_up_parks_with_its_own_code() {
    let e = env().await;
    e.init("s1", None).await;
    let r = e.call("s1", "deploy", "release", json!({})).await;
    assert_eq!(error(&r).code, rpc::STEP_UP_PARKED);
    assert_eq!(data(&r, "deadline"), "2025-01-15T10:05:00.000Z");
}

#[tokio::test]
async fn approval_api_statuses() {
    let e = env().await;
    e.init("s1", None).await;
    let r = e.call("s1", "deploy", "release", json!({})).await;
    let item = data(&r, "item_id");
    assert_eq!(e.decide(&item, "ALLOW", "wrong").await.0, 403);
    assert_eq!(e.decide("no-such-item", "ALLOW", TOKEN).await.0, 404);
    assert_eq!(e.decide(&item, "MAYBE", TOKEN).await.0, 400);
    let (ok, body) = e.decide(&item, "DENY", TOKEN).await;
    assert_eq!((ok, body["status"].as_str()), (200, Some("RESOLVED_DENY")));
    assert_eq!(e.decide(&item, "ALLOW", TOKEN).await.0, 409);
    let (_, pending) = e.get("/v1/pending?session_id=s1").await;
    assert_eq!(pending, json!([]));
    let (_, history) = e.get("/v1/pending?session_id=s1&status=all").await;
    assert_eq!(history[0]["result"]["resolution_method"], "human_deny");
    let (_, receipts) = e.get("/v1/receipts?session_id=s1").await;
    let follow = receipts.as_array().unwrap().last().unwrap();
    assert_eq!(follow["approval"]["approver"], "secops@company.com");
    assert_eq!(follow["approval"]["note"], "checked");
    let (_, events) = e.get("/v1/events?kind=APPROVER_REJECTED").await;
    assert_eq!(events.as_array().unwrap().len(), 1);
    assert!(e.upstream().is_empty());
}

#[tokio::test]
async fn published_receipts_verify_offline() {
    let e = env().await;
    e.init("s1", Some("Summarize Q3 sales")).await;
    e.call("s1", "db", "query", json!({"sql": "SELECT * FROM customers"})).await;
    e.call("s1", "email", "send", json!({"to": "x@partner.com"})).await;
    e.call("s1", "ghost", "run", json!({})).await;
    let keys: Value = e.http.get(format!("{}/keys.json", e.url)).send().await.unwrap().json().await.unwrap();
    let text = e.http.get(format!("{}/receipts.jsonl", e.url)).send().await.unwrap().text().await.unwrap();
    let keys = PublicKeys::from_json(&keys).unwrap();
    let verdicts = verify_receipts_text(&text, &keys);
    assert_eq!(verdicts.len(), 3);
    assert!(verdicts.iter().all(|v| v.result.is_ok()), "{verdicts:?}");
    assert_eq!(std::fs::read_to_string(e.dir.path().join("data/receipts.jsonl")).unwrap(), text);
}

#[tokio::test]
async fn verify_endpoint_reports_tampering() {
    let e = env().await;
    e.init("s1", None).await;
    e.call("s1", "web", "fetch", json!({"url": "https://a.example"})).await;
    e.call("s1", "web", "fetch", json!({"url": "https://b.example"})).await;
    let (_, ok) = e.get("/v1/sessions/s1/verify").await;
    assert_eq!((ok["status"].as_str(), ok["entries"].as_u64()), (Some("ok"), Some(2)));
    let path = e.dir.path().join("data/s1.ctx.jsonl");
    let mut bytes = std::fs::read(&path).unwrap();
    let last_line_start = bytes[..bytes.len() - 1].iter().rposition(|b| *b == b'\n').unwrap() + 1;
    bytes[last_line_start + 10] ^= 0x01;
    std::fs::write(&path, bytes).unwrap();
    let (_, bad) = e.get("/v1/sessions/s1/verify").await;
    assert_eq!(bad["status"], "corrupt");
    assert!(bad["seq"].as_u64().unwrap() <= 2);
    let (_, events) = e.get("/v1/events?kind=CHAIN_VERIFICATION").await;
    assert_eq!(events[1]["severity"], "CRITICAL");
    assert_eq!(e.get("/v1/sessions/none/verify").await.0, 404);
}

#[tokio::test]
async fn telemetry_reaches_the_file_sink() {
    let e = env().await;
    e.init("s1", None).await;
    e.call("s1", "web", "fetch", json!({"url": "https://a.example"})).await;
    e.call("s1", "deploy", "release", json!({})).await;
    assert!(e.engine.telemetry().flush(std::time::Duration::from_secs(5)));
    let text = std::fs::read_to_string(e.dir.path().join("events.jsonl")).unwrap();
    let kinds: Vec<String> = text.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["kind"].as_str().unwrap().to_owned()).collect();
    assert_eq!(kinds, ["CONFIG_LOADED", "DECISION", "DECISION", "PENDING_CREATED"]);
}

#[tokio::test]
async fn tools_list_is_proxied() {
    let e = env().await;
    let r = e.rpc("tools/list", json!({})).await;
    let names: Vec<String> =
        r.result.unwrap()["tools"].as_array().unwrap().iter().map(|t| t["name"].as_str().unwrap().to_owned()).collect();
    assert!(names.contains(&"email.send".to_owned()));
    assert!(names.contains(&"down".to_owned()));
    assert!(!names.iter().any(|n| n.starts_with("crm")));
}

#[tokio::test]
async fn console_assets_are_served_only_when_enabled() {
    let off = env().await;
    assert_eq!(off.http.get(format!("{}/console/", off.url)).send().await.unwrap().status(), 404);
    let on = env_with(Setup { console: true, ..Setup::default() }).await;
    let page = on.http.get(format!("{}/console/", on.url)).send().await.unwrap();
    assert_eq!(page.status(), 200);
    assert!(page.text().await.unwrap().contains("approvals"));
}

#[tokio::test]
async fn missing_console_directory_is_a_startup_error() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("p.json"), policies().to_string()).unwrap();
    let c = GatewayConfig::parse(r#"{"policy_file": "p.json", "data_dir": "d", "console_dir": "nowhere"}"#, dir.path()).unwrap();
    let opts = ServeOptions { console: true, ..ServeOptions::default() };
    let err = Gateway::build(c, opts).await.err().unwrap();
    assert!(err.to_string().contains("does not exist"));
    assert!(!Path::new(&dir.path().join("nowhere")).exists());
}
