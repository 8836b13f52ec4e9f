//! The gateway under test plus what the harness hosts for it: the mock
//! tool server and the controllable clock.

use crate::client::{observe, Client, Observed};
use crate::fixture::POLICIES;
use aarm_core::clock::{Clock, ManualClock};
use aarm_core::model::parse_utc;
use aarm_core::receipt::Ed25519Signer;
use aarm_core::telemetry::SinkConfig;
use aarm_gateway::clock::manual_clock_router;
use aarm_gateway::mock::MockUpstream;
use aarm_gateway::rpc::Response;
use aarm_gateway::{Gateway, GatewayConfig, ServeOptions};
use anyhow::Context;
use axum::Router;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use tempfile::TempDir;

pub const START_TIME: &str = "2025-01-15T10:00:00Z";
pub const APPROVER_TOKEN: &str = "conformance-approver";
pub const APPROVER: &str = "approver@conformance.test";
pub const SEED: u64 = 42;
/// Tools the conformance policy set refers to, all served by the mock.
pub const TOOLS: &[&str] = &["crm", "db", "docs", "email", "web", "http", "files", "secrets", "deploy", "fail"];

pub async fn serve(router: Router, addr: &str) -> anyhow::Result<String> {
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    let local = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router).await {
            eprintln!("harness listener stopped: {e}");
        }
    });
    Ok(format!("http://{local}"))
}

/// A gateway started by the harness, with its own mock and clock.
pub struct Instance {
    pub url: String,
    pub data_dir: PathBuf,
    pub mock: Arc<MockUpstream>,
    pub clock: Arc<ManualClock>,
    dir: TempDir,
}

impl Instance {
    pub fn dir(&self) -> &Path {
        self.dir.path()
    }
}

pub fn start_time() -> chrono::DateTime<chrono::Utc> {
    parse_utc(START_TIME).expect("valid start time")
}

/// Start an in-process gateway in test mode: seeded ids, harness clock,
/// the conformance policy set, and every tool routed to a fresh mock.
pub async fn launch(telemetry: Option<SinkConfig>) -> anyhow::Result<Instance> {
    let dir = TempDir::new()?;
    let mock = MockUpstream::create(&dir.path().join("mock"))?;
    let mock_url = serve(mock.router(), "127.0.0.1:0").await?;
    let clock = Arc::new(ManualClock::new(start_time()));
    let clock_url = serve(manual_clock_router(clock.clone()), "127.0.0.1:0").await?;
    std::fs::write(dir.path().join("policies.json"), POLICIES)?;
    let tools: serde_json::Map<String, Value> = TOOLS.iter().map(|t| (t.to_string(), json!(format!("{mock_url}/rpc")))).collect();
    let telemetry = telemetry.unwrap_or_else(|| SinkConfig::File(dir.path().join("events.jsonl")));
    let config = json!({
        "policy_file": "policies.json",
        "data_dir": "data",
        "tools": tools,
        "approvers": {APPROVER_TOKEN: APPROVER},
        "timeouts": {"hold_secs": 0.05},
        "telemetry": telemetry,
    });
    let config = GatewayConfig::parse(&config.to_string(), dir.path())?;
    let data_dir = config.data_dir.clone();
    // A seeded key keeps signatures, and so reports, reproducible.
    std::fs::create_dir_all(&data_dir)?;
    Ed25519Signer::from_seed([SEED as u8; 32]).save(&config.signing_key_path())?;
    let opts = ServeOptions { test_clock: Some(format!("{clock_url}/now")), seed: Some(SEED), ..ServeOptions::default() };
    let gw = Gateway::build(config, opts).await?;
    gw.spawn_sweeper();
    let url = serve(gw.router(), "127.0.0.1:0").await?;
    Ok(Instance { url, data_dir, mock, clock, dir })
}

/// Where the harness listens when the gateway is started elsewhere.
#[derive(Debug, Clone)]
pub struct ExternalTarget {
    pub url: String,
    /// The target's data directory, for ledger tampering.
    pub data_dir: Option<PathBuf>,
    pub mock_listen: String,
    pub clock_listen: String,
    pub approver_token: String,
    pub cascade_limit: usize,
    pub session_prefix: String,
}

pub struct Harness {
    pub client: Client,
    pub mock: Arc<MockUpstream>,
    pub clock: Arc<ManualClock>,
    pub data_dir: Option<PathBuf>,
    pub approver_token: String,
    pub cascade_limit: usize,
    pub session_prefix: String,
    /// Whether the harness started the gateway and may start more.
    pub self_hosted: bool,
    pub label: String,
    _instance: Option<Instance>,
    _mock_dir: Option<TempDir>,
}

pub fn identity(session: &str) -> Value {
    json!({
        "human_principal": "alice@company.com",
        "service_identity": "agent-svc@iam.company.com",
        "agent_identity": "assistant-v1",
        "session_id": session,
        "privilege_scope": ["crm:read", "email:send", "db:read"]
    })
}

impl Harness {
    pub async fn self_hosted() -> anyhow::Result<Self> {
        let inst = launch(None).await?;
        Ok(Harness {
            client: Client::new(&inst.url),
            mock: inst.mock.clone(),
            clock: inst.clock.clone(),
            data_dir: Some(inst.data_dir.clone()),
            approver_token: APPROVER_TOKEN.into(),
            cascade_limit: 8,
            session_prefix: String::new(),
            self_hosted: true,
            label: "self-hosted reference gateway".into(),
            _instance: Some(inst),
            _mock_dir: None,
        })
    }

    /// Drive an instance another harness owns.
    pub fn attach(inst: &Instance) -> Self {
        Harness {
            client: Client::new(&inst.url),
            mock: inst.mock.clone(),
            clock: inst.clock.clone(),
            data_dir: Some(inst.data_dir.clone()),
            approver_token: APPROVER_TOKEN.into(),
            cascade_limit: 8,
            session_prefix: String::new(),
            self_hosted: false,
            label: inst.url.clone(),
            _instance: None,
            _mock_dir: None,
        }
    }

    /// Host the mock and clock for a gateway configured to use them.
    pub async fn external(t: ExternalTarget) -> anyhow::Result<Self> {
        let dir = TempDir::new()?;
        let mock = MockUpstream::create(dir.path())?;
        serve(mock.router(), &t.mock_listen).await?;
        let clock = Arc::new(ManualClock::new(start_time()));
        serve(manual_clock_router(clock.clone()), &t.clock_listen).await?;
        Ok(Harness {
            client: Client::new(&t.url),
            mock,
            clock,
            data_dir: t.data_dir,
            approver_token: t.approver_token,
            cascade_limit: t.cascade_limit,
            session_prefix: t.session_prefix,
            self_hosted: false,
            label: t.url,
            _instance: None,
            _mock_dir: Some(dir),
        })
    }

    pub fn session(&self, name: &str) -> String {
        format!("{}{name}", self.session_prefix)
    }

    pub fn now(&self) -> chrono::DateTime<chrono::Utc> {
        self.clock.now()
    }

    pub async fn init(&self, session: &str, original_request: Option<&str>) -> anyhow::Result<Response> {
        let mut p = json!({"session_id": session, "identity": identity(session)});
        if let Some(r) = original_request {
            p["original_request"] = json!(r);
        }
        self.client.rpc("session/initialize", p).await
    }

    /// Initialize and require success.
    pub async fn open(&self, session: &str, original_request: Option<&str>) -> anyhow::Result<()> {
        let r = self.init(session, original_request).await?;
        match r.error {
            None => Ok(()),
            Some(e) => anyhow::bail!("session/initialize {session} failed: {} {}", e.code, e.message),
        }
    }

    pub async fn call(&self, session: &str, tool: &str, op: &str, params: Value) -> anyhow::Result<(Response, Observed)> {
        let p = json!({"session_id": session, "tool": tool, "operation": op, "parameters": params});
        let r = self.client.rpc("tools/call", p).await?;
        let o = observe(&r);
        Ok((r, o))
    }

    pub async fn poll(&self, session: &str, item_id: &str) -> anyhow::Result<(Response, Observed)> {
        let r = self.client.rpc("pending/status", json!({"session_id": session, "item_id": item_id})).await?;
        let o = observe(&r);
        Ok((r, o))
    }

    pub async fn receipts(&self, session: &str) -> anyhow::Result<Vec<Value>> {
        let (status, v) = self.client.get(&format!("/v1/receipts?session_id={session}")).await?;
        anyhow::ensure!(status == 200, "GET /v1/receipts returned HTTP {status}");
        Ok(v.as_array().cloned().unwrap_or_default())
    }

    pub async fn events(&self, session: &str, kind: Option<&str>) -> anyhow::Result<Vec<Value>> {
        let path = match kind {
            Some(k) => format!("/v1/events?session_id={session}&kind={k}"),
            None => format!("/v1/events?session_id={session}"),
        };
        let (status, v) = self.client.get(&path).await?;
        anyhow::ensure!(status == 200, "GET /v1/events returned HTTP {status}");
        Ok(v.as_array().cloned().unwrap_or_default())
    }

    pub async fn pending(&self, session: &str) -> anyhow::Result<Vec<Value>> {
        let (status, v) = self.client.get(&format!("/v1/pending?session_id={session}")).await?;
        anyhow::ensure!(status == 200, "GET /v1/pending returned HTTP {status}");
        Ok(v.as_array().cloned().unwrap_or_default())
    }

    pub async fn decide(&self, item_id: &str, verdict: &str, token: &str) -> anyhow::Result<(u16, Value)> {
        let body = json!({"verdict": verdict, "note": "conformance", "approver_token": token});
        self.client.post(&format!("/v1/pending/{item_id}/decision"), &body).await
    }

    /// Calls the mock received for one session.
    pub fn upstream(&self, session: &str) -> Vec<Value> {
        self.mock.calls().into_iter().filter(|c| c["session_id"] == session).collect()
    }

    pub fn reached_upstream(&self, session: &str, seq: u64) -> Option<Value> {
        self.upstream(session).into_iter().find(|c| c["seq"] == seq)
    }
}
