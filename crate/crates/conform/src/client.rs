//! Wire-level access to a gateway under test.

use aarm_gateway::rpc::{self, Response};
use serde::Serialize;
use serde_json::Value;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

/// The target could not be reached; checks report SKIPPED, never PASS.
#[derive(Debug, thiserror::Error)]
#[error("target down: {0}")]
pub struct TargetDown(pub String);

pub struct Client {
    base: String,
    http: reqwest::Client,
    next_id: AtomicU64,
}

fn down(e: reqwest::Error) -> anyhow::Error {
    if e.is_connect() || e.is_timeout() || e.is_request() {
        TargetDown(e.to_string()).into()
    } else {
        e.into()
    }
}

impl Client {
    pub fn new(base: &str) -> Self {
        let http = reqwest::Client::builder().timeout(Duration::from_secs(120)).build().expect("http client");
        Client { base: base.trim_end_matches('/').to_owned(), http, next_id: AtomicU64::new(1) }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub async fn rpc(&self, method: &str, params: Value) -> anyhow::Result<Response> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let resp = self.http.post(format!("{}/rpc", self.base)).json(&rpc::request(id, method, params)).send().await.map_err(down)?;
        Ok(resp.json().await?)
    }

    pub async fn get(&self, path: &str) -> anyhow::Result<(u16, Value)> {
        let resp = self.http.get(format!("{}{path}", self.base)).send().await.map_err(down)?;
        let status = resp.status().as_u16();
        Ok((status, resp.json().await.unwrap_or(Value::Null)))
    }

    pub async fn get_text(&self, path: &str) -> anyhow::Result<(u16, String)> {
        let resp = self.http.get(format!("{}{path}", self.base)).send().await.map_err(down)?;
        let status = resp.status().as_u16();
        Ok((status, resp.text().await?))
    }

    pub async fn post(&self, path: &str, body: &Value) -> anyhow::Result<(u16, Value)> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await.map_err(down)?;
        let status = resp.status().as_u16();
        Ok((status, resp.json().await.unwrap_or(Value::Null)))
    }

    /// Ok(()) iff the target answers its health probe.
    pub async fn probe(&self) -> anyhow::Result<()> {
        match self.get("/healthz").await? {
            (200, _) => Ok(()),
            (s, _) => Err(TargetDown(format!("health probe returned HTTP {s}")).into()),
        }
    }
}

/// What a `tools/call` or `pending/status` reply says happened.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Observed {
    /// ALLOW, MODIFY, DENY, DEFER, STEP_UP, PENDING, or ERROR.
    pub decision: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub code: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub receipt_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub defer_reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deadline: Option<String>,
    /// The tool ran but reported failure.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub execution_error: bool,
}

fn s(v: &Value, key: &str) -> Option<String> {
    v.get(key).and_then(Value::as_str).map(str::to_owned)
}

pub fn observe(resp: &Response) -> Observed {
    if let Some(e) = &resp.error {
        let data = e.data.clone().unwrap_or(Value::Null);
        let decision = match e.code {
            rpc::DENY => "DENY",
            rpc::DEFER_PARKED => "DEFER",
            rpc::STEP_UP_PARKED => "STEP_UP",
            _ => "ERROR",
        };
        return Observed {
            decision: decision.into(),
            reason: Some(e.message.clone()),
            code: Some(e.code),
            receipt_id: s(&data, "receipt_id"),
            seq: data.get("seq").and_then(Value::as_u64),
            item_id: s(&data, "item_id"),
            defer_reason: s(&data, "defer_reason"),
            resolution: s(&data, "resolution"),
            deadline: s(&data, "deadline"),
            execution_error: false,
        };
    }
    let r = resp.result.clone().unwrap_or(Value::Null);
    let decision = match (s(&r, "status").as_deref(), s(&r, "decision")) {
        (Some("PENDING"), _) => "PENDING".to_owned(),
        (_, Some(d)) => d,
        _ => "ERROR".to_owned(),
    };
    Observed {
        decision,
        receipt_id: s(&r, "receipt_id"),
        seq: r.get("seq").and_then(Value::as_u64),
        item_id: s(&r, "item_id"),
        resolution: s(&r, "resolution"),
        deadline: s(&r, "deadline"),
        execution_error: r.get("isError") == Some(&Value::Bool(true)),
        ..Observed::default()
    }
}
