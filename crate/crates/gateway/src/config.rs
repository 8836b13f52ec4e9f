//! Gateway configuration file.
//!
//! Relative paths are resolved against the directory holding the file.

use aarm_core::intent::{EmbedderSpec, DEFAULT_DIMENSION};
use aarm_core::telemetry::{EventFilter, SinkConfig};
use anyhow::{bail, Context};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timeouts {
    #[serde(default = "default_step_up")]
    pub step_up_secs: u64,
    #[serde(default = "default_defer")]
    pub defer_secs: u64,
    /// How long a tools/call stays open waiting for a parked item.
    #[serde(default = "default_hold")]
    pub hold_secs: f64,
    #[serde(default = "default_upstream")]
    pub upstream_secs: f64,
    #[serde(default = "default_sweep")]
    pub sweep_secs: f64,
}

fn default_step_up() -> u64 {
    300
}
fn default_defer() -> u64 {
    120
}
fn default_hold() -> f64 {
    30.0
}
fn default_upstream() -> f64 {
    30.0
}
fn default_sweep() -> f64 {
    5.0
}
fn default_cascade() -> usize {
    8
}
fn default_listen() -> String {
    "127.0.0.1:8080".into()
}
fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts {
            step_up_secs: default_step_up(),
            defer_secs: default_defer(),
            hold_secs: default_hold(),
            upstream_secs: default_upstream(),
            sweep_secs: default_sweep(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Tool name to upstream JSON-RPC endpoint.
    #[serde(default)]
    pub tools: BTreeMap<String, String>,
    pub policy_file: PathBuf,
    pub data_dir: PathBuf,
    #[serde(default)]
    pub timeouts: Timeouts,
    #[serde(default = "default_cascade")]
    pub cascade_limit: usize,
    /// Bearer token to approver identity.
    #[serde(default)]
    pub approvers: BTreeMap<String, String>,
    /// Base64 Ed25519 seed; created on first start when missing.
    #[serde(default)]
    pub signing_key: Option<PathBuf>,
    #[serde(default)]
    pub telemetry: Option<SinkConfig>,
    #[serde(default)]
    pub telemetry_filter: EventFilter,
    /// Parameter keys replaced by a digest in receipts.
    #[serde(default)]
    pub redact_params: Vec<String>,
    #[serde(default)]
    pub embedder: EmbedderSpec,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    /// Only CLOSED is accepted.
    #[serde(default)]
    pub fail_mode: Option<String>,
    /// Static approval console assets, served under /console.
    #[serde(default)]
    pub console_dir: Option<PathBuf>,
}

impl GatewayConfig {
    pub fn parse(text: &str, base: &Path) -> anyhow::Result<Self> {
        let mut c: GatewayConfig = serde_json::from_str(text).context("invalid gateway configuration")?;
        if let Some(mode) = &c.fail_mode {
            if mode != "CLOSED" {
                bail!("fail_mode {mode:?} is not supported; the gateway always fails closed");
            }
        }
        if c.cascade_limit == 0 {
            bail!("cascade_limit must be at least 1");
        }
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut c.policy_file);
        resolve(&mut c.data_dir);
        if let Some(k) = c.signing_key.as_mut() {
            resolve(k);
        }
        if let Some(d) = c.console_dir.as_mut() {
            resolve(d);
        }
        if let Some(SinkConfig::File(p)) = c.telemetry.as_mut() {
            resolve(p);
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        GatewayConfig::parse(&text, &base).with_context(|| format!("in {}", path.display()))
    }

    pub fn signing_key_path(&self) -> PathBuf {
        self.signing_key.clone().unwrap_or_else(|| self.data_dir.join("signing.key"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_relative_paths() {
        let c = GatewayConfig::parse(r#"{"policy_file": "p.json", "data_dir": "data"}"#, Path::new("/etc/aarm")).unwrap();
        assert_eq!(c.policy_file, Path::new("/etc/aarm/p.json"));
        assert_eq!(c.timeouts.step_up_secs, 300);
        assert_eq!(c.timeouts.defer_secs, 120);
        assert_eq!(c.timeouts.hold_secs, 30.0);
        assert_eq!(c.cascade_limit, 8);
        assert_eq!(c.signing_key_path(), Path::new("/etc/aarm/data/signing.key"));
    }

    #[test]
    fn fail_open_is_rejected() {
        let err = GatewayConfig::parse(r#"{"policy_file": "p", "data_dir": "d", "fail_mode": "OPEN"}"#, Path::new("."));
        assert!(err.unwrap_err().to_string().contains("fails closed"));
    }

    #[test]
    fn telemetry_sinks_parse() {
        let c = GatewayConfig::parse(
            r#"{"policy_file": "p", "data_dir": "d", "telemetry": {"http": "http://siem/ingest"}}"#,
            Path::new("."),
        )
        .unwrap();
        assert_eq!(c.telemetry, Some(SinkConfig::Http("http://siem/ingest".into())));
        let c = GatewayConfig::parse(r#"{"policy_file": "p", "data_dir": "d", "telemetry": {"file": "ev.jsonl"}}"#, Path::new("/x"))
            .unwrap();
        assert_eq!(c.telemetry, Some(SinkConfig::File("/x/ev.jsonl".into())));
    }
}
