//! Forwarding to backend tool servers. The upstream protocol mirrors the
//! agent-facing one: a JSON-RPC `tools/call` per action.

use crate::rpc::{self, Response};
use aarm_core::model::{Action, Params};
use aarm_core::orchestrator::ToolForwarder;
use async_trait::async_trait;
use serde_json::{json, Value};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

pub struct HttpForwarder {
    registry: BTreeMap<String, String>,
    client: reqwest::Client,
    next_id: AtomicU64,
}

impl HttpForwarder {
    pub fn new(registry: BTreeMap<String, String>, timeout: Duration) -> anyhow::Result<Self> {
        let client = reqwest::Client::builder().timeout(timeout).build()?;
        Ok(HttpForwarder { registry, client, next_id: AtomicU64::new(1) })
    }

    async fn rpc(&self, url: &str, method: &str, params: Value) -> Result<Value, String> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let resp = self
            .client
            .post(url)
            .json(&rpc::request(id, method, params))
            .send()
            .await
            .map_err(|e| format!("upstream unreachable: {e}"))?;
        let status = resp.status();
        let body: Response = resp.json().await.map_err(|e| format!("upstream returned HTTP {status} without a JSON-RPC body: {e}"))?;
        match (body.result, body.error) {
            (_, Some(e)) => Err(format!("upstream error {}: {}", e.code, e.message)),
            (Some(r), None) => Ok(r),
            (None, None) => Err("upstream response has neither result nor error".into()),
        }
    }

    /// Tool descriptors from every distinct upstream. An upstream that
    /// cannot list its tools contributes bare names from the registry.
    pub async fn list_tools(&self) -> Vec<Value> {
        let mut by_url: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (tool, url) in &self.registry {
            by_url.entry(url).or_default().push(tool);
        }
        let mut out = Vec::new();
        for (url, tools) in by_url {
            let allowed: BTreeSet<&str> = tools.iter().copied().collect();
            let listed = self.rpc(url, "tools/list", json!({})).await.ok().and_then(|r| r.get("tools").and_then(Value::as_array).cloned());
            match listed {
                Some(items) => out.extend(items.into_iter().filter(|t| {
                    t.get("name").and_then(Value::as_str).is_some_and(|n| allowed.contains(n.split('.').next().unwrap_or(n)))
                })),
                None => out.extend(tools.iter().map(|t| json!({"name": t}))),
            }
        }
        out
    }
}

#[async_trait]
impl ToolForwarder for HttpForwarder {
    fn is_registered(&self, tool: &str) -> bool {
        self.registry.contains_key(tool)
    }

    async fn forward(&self, action: &Action, parameters: &Params) -> Result<Value, String> {
        let url = self.registry.get(&action.tool).ok_or_else(|| format!("tool {:?} has no upstream", action.tool))?;
        let params = json!({
            "session_id": action.session_id(),
            "seq": action.seq,
            "tool": action.tool,
            "operation": action.operation,
            "parameters": parameters,
        });
        self.rpc(url, "tools/call", params).await
    }
}
