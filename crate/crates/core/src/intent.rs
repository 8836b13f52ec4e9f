//! Semantic distance between the session's original request and each
//! action, and the running-maximum drift built from it.
//!
//! The shipped [`BagEmbedder`] tokenizes to lowercase alphanumeric runs,
//! hashes each token with FNV-1a (64-bit) into one of `dimension` buckets
//! (256 by default), and L2-normalizes the bucket counts. Distance is
//! `1 - cosine`, with the cosine clamped to `[0, 1]` first.

use crate::model::Action;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::io::Write;
use std::process::{Command, Stdio};

pub const DEFAULT_DIMENSION: usize = 256;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum IntentError {
    #[error("no original request to measure against")]
    NoBaseline,
    #[error("distance {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("embedder failed: {0}")]
    Embedder(String),
}

/// Turns text into a fixed-dimension vector.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, IntentError>;
}

/// Deterministic hashed bag-of-tokens embedder.
#[derive(Debug, Clone)]
pub struct BagEmbedder {
    dimension: usize,
}

impl BagEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        BagEmbedder { dimension }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dimension as u64) as usize
    }
}

impl Default for BagEmbedder {
    fn default() -> Self {
        BagEmbedder::new(DEFAULT_DIMENSION)
    }
}

impl Embedder for BagEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, IntentError> {
        let mut v = vec![0.0; self.dimension];
        for token in tokenize(text) {
            v[self.bucket(&token)] += 1.0;
        }
        normalize(&mut v);
        Ok(v)
    }
}

/// Lowercase maximal alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, b| (h ^ *b as u64).wrapping_mul(PRIME))
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Embedder backed by an external command: the text is written to its
/// stdin and it prints `dimension` comma-separated decimals.
#[derive(Debug, Clone)]
pub struct ExecEmbedder {
    command: String,
    dimension: usize,
}

impl ExecEmbedder {
    pub fn new(command: impl Into<String>, dimension: usize) -> Self {
        ExecEmbedder { command: command.into(), dimension }
    }
}

impl Embedder for ExecEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, IntentError> {
        let fail = |m: String| IntentError::Embedder(m);
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        child
            .stdin
            .take()
            .ok_or_else(|| fail("no stdin".into()))?
            .write_all(text.as_bytes())
            .map_err(|e| fail(e.to_string()))?;
        let output = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        if !output.status.success() {
            return Err(fail(format!("exited with {}", output.status)));
        }
        let stdout = String::from_utf8(output.stdout).map_err(|e| fail(e.to_string()))?;
        let mut v = stdout
            .trim()
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| fail(format!("{s:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if v.len() != self.dimension || v.iter().any(|x| !x.is_finite()) {
            return Err(fail(format!("expected {} finite values, got {}", self.dimension, v.len())));
        }
        normalize(&mut v);
        Ok(v)
    }
}

/// Embedder selection as written in configuration:
/// `"builtin-bag"` or `{"exec": "<command>"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EmbedderSpec {
    Named(String),
    Exec { exec: String },
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::Named("builtin-bag".into())
    }
}

impl EmbedderSpec {
    pub fn build(&self, dimension: usize) -> Result<Box<dyn Embedder>, String> {
        if dimension == 0 {
            return Err("embedder dimension must be positive".into());
        }
        match self {
            EmbedderSpec::Named(name) if name == "builtin-bag" => Ok(Box::new(BagEmbedder::new(dimension))),
            EmbedderSpec::Named(other) => Err(format!("unknown embedder {other:?}")),
            EmbedderSpec::Exec { exec } => Ok(Box::new(ExecEmbedder::new(exec.clone(), dimension))),
        }
    }
}

/// Text stand-in for an action: tool, operation, then every string and
/// number parameter value in key-sorted order, space-joined, lowercased.
pub fn action_descriptor(action: &Action) -> String {
    let mut parts = vec![action.tool.clone(), action.operation.clone()];
    let mut keys: Vec<&String> = action.parameters.keys().collect();
    keys.sort();
    for key in keys {
        flatten(&action.parameters[key], &mut parts);
    }
    parts.join(" ").to_lowercase()
}

fn flatten(value: &Value, out: &mut Vec<String>) {
    match value {
        Value::String(s) => out.push(s.clone()),
        Value::Number(n) => out.push(n.to_string()),
        Value::Array(items) => items.iter().for_each(|v| flatten(v, out)),
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            for k in keys {
                flatten(&map[k], out);
            }
        }
        Value::Bool(_) | Value::Null => {}
    }
}

/// `1 - cosine`, with the cosine clamped to `[0, 1]`. Zero vectors have
/// similarity 0.
pub fn vector_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cosine = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
    1.0 - cosine.clamp(0.0, 1.0)
}

/// Semantic distance between an original request and an action.
pub fn distance(original: &str, action: &Action, embedder: &dyn Embedder) -> Result<f64, IntentError> {
    if original.trim().is_empty() {
        return Err(IntentError::NoBaseline);
    }
    let baseline = embedder.embed(original)?;
    let current = embedder.embed(&action_descriptor(action))?;
    Ok(vector_distance(&baseline, &current))
}

/// Per-session drift state. `running_max` is the cumulative drift.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DriftTracker {
    pub session_id: String,
    #[serde(skip)]
    baseline: Option<Vec<f64>>,
    distances: Vec<f64>,
    running_max: f64,
    threshold: f64,
}

impl DriftTracker {
    pub fn new(session_id: impl Into<String>, threshold: f64) -> Self {
        DriftTracker { session_id: session_id.into(), threshold, ..Default::default() }
    }

    /// Install the original request as the baseline.
    pub fn set_baseline(&mut self, original: &str, embedder: &dyn Embedder) -> Result<(), IntentError> {
        if original.trim().is_empty() {
            return Err(IntentError::NoBaseline);
        }
        self.baseline = Some(embedder.embed(original)?);
        Ok(())
    }

    pub fn has_baseline(&self) -> bool {
        self.baseline.is_some()
    }

    /// Distance of `action` from the baseline, without recording it.
    pub fn measure(&self, action: &Action, embedder: &dyn Embedder) -> Result<f64, IntentError> {
        let baseline = self.baseline.as_ref().ok_or(IntentError::NoBaseline)?;
        Ok(vector_distance(baseline, &embedder.embed(&action_descriptor(action))?))
    }

    /// Record a distance. Returns true iff this update pushed the running
    /// maximum above the threshold (edge-triggered).
    pub fn update(&mut self, d: f64) -> Result<bool, IntentError> {
        if !(0.0..=1.0).contains(&d) {
            return Err(IntentError::OutOfRange(d));
        }
        let was_over = self.running_max > self.threshold;
        self.distances.push(d);
        self.running_max = self.running_max.max(d);
        Ok(!was_over && self.running_max > self.threshold)
    }

    /// Cumulative drift, or `None` without a baseline.
    pub fn cumulative(&self) -> Option<f64> {
        self.baseline.as_ref().map(|_| self.running_max)
    }

    pub fn running_max(&self) -> f64 {
        self.running_max
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ContextRef, Identity};
    use proptest::prelude::*;
    use serde_json::json;
    use std::collections::HashMap;

    fn action(tool: &str, op: &str, params: Value) -> Action {
        Action {
            tool: tool.into(),
            operation: op.into(),
            parameters: params.as_object().unwrap().clone(),
            identity: Identity::default(),
            context_ref: ContextRef { session_id: "s".into(), seq: 0 },
            timestamp: "2025-01-15T10:30:00Z".into(),
            seq: 1,
        }
    }

    #[test]
    fn descriptor_examples() {
        assert_eq!(
            action_descriptor(&action("email", "send", json!({"to": "x@y.com", "subject": "Hi"}))),
            "email send hi x@y.com"
        );
        assert_eq!(
            action_descriptor(&action("db", "query", json!({"sql": "SELECT * FROM customers"}))),
            "db query select * from customers"
        );
    }

    #[test]
    fn descriptor_ignores_key_order() {
        let a = action("t", "o", json!({"a": "one", "b": 2, "c": ["x", {"z": "q", "y": "p"}]}));
        let mut reversed = serde_json::Map::new();
        for (k, v) in a.parameters.iter().rev() {
            reversed.insert(k.clone(), v.clone());
        }
        let mut b = a.clone();
        b.parameters = reversed;
        assert_eq!(action_descriptor(&a), action_descriptor(&b));
        assert_eq!(action_descriptor(&a), "t o one 2 x p q");
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn identical_text_has_zero_distance() {
        let a = action("email", "send", json!({"to": "x@y.com", "subject": "Hi"}));
        let d = distance(&action_descriptor(&a), &a, &BagEmbedder::default()).unwrap();
        assert!(d.abs() < 1e-9, "{d}");
    }

    /// Oracle: sparse bucket maps built independently of the embedder.
    fn oracle_distance(x: &str, y: &str, dim: u64) -> f64 {
        let count = |s: &str| {
            let mut m: HashMap<u64, f64> = HashMap::new();
            for t in s.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
                let mut h: u64 = 14695981039346656037;
                for b in t.bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(1099511628211);
                }
                *m.entry(h % dim).or_default() += 1.0;
            }
            m
        };
        let (mx, my) = (count(x), count(y));
        let dot: f64 = mx.iter().map(|(k, v)| v * my.get(k).copied().unwrap_or(0.0)).sum();
        let nx = mx.values().map(|v| v * v).sum::<f64>().sqrt();
        let ny = my.values().map(|v| v * v).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            1.0
        } else {
            1.0 - (dot / (nx * ny)).clamp(0.0, 1.0)
        }
    }

    #[test]
    fn disjoint_tokens_have_unit_distance() {
        let a = action("weather", "lookup", json!({"city": "oslo"}));
        let e = BagEmbedder::default();
        let original = "summarize quarterly revenue";
        // Bucket sets are disjoint for these tokens; check directly.
        let xb: Vec<usize> = tokenize(original).iter().map(|t| e.bucket(t)).collect();
        let yb: Vec<usize> = tokenize(&action_descriptor(&a)).iter().map(|t| e.bucket(t)).collect();
        assert!(xb.iter().all(|b| !yb.contains(b)));
        let d = distance(original, &a, &e).unwrap();
        assert!((d - 1.0).abs() < 1e-9);
        assert!((d - oracle_distance(original, &action_descriptor(&a), 256)).abs() < 1e-12);
    }

    #[test]
    fn sales_request_vs_external_upload_exceeds_default_threshold() {
        let a = action(
            "email",
            "send",
            json!({"to": "external@partner.com", "subject": "Customer Data", "body": "..."}),
        );
        let d = distance("Summarize Q3 sales for leadership", &a, &BagEmbedder::default()).unwrap();
        assert!(d > 0.6, "{d}");
    }

    #[test]
    fn empty_baseline_is_an_error() {
        let a = action("t", "o", json!({}));
        assert_eq!(distance("  ", &a, &BagEmbedder::default()), Err(IntentError::NoBaseline));
    }

    #[test]
    fn drift_updates() {
        let mut t = DriftTracker::new("s", 0.6);
        for d in [0.1, 0.2, 0.15] {
            assert!(!t.update(d).unwrap());
        }
        assert_eq!(t.running_max(), 0.2);
        assert!(t.update(0.7).unwrap());
        assert!(!t.update(0.7).unwrap());
        assert!(!t.update(0.9).unwrap());
        assert_eq!(t.update(1.5), Err(IntentError::OutOfRange(1.5)));
    }

    #[test]
    fn exec_embedder_round_trip() {
        let e = ExecEmbedder::new("cat >/dev/null; echo 3,4,0", 3);
        let v = e.embed("anything").unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
        assert!(ExecEmbedder::new("cat >/dev/null; echo 1,2", 3).embed("x").is_err());
        assert!(ExecEmbedder::new("exit 3", 3).embed("x").is_err());
    }

    #[test]
    fn embedder_spec_parses() {
        let named: EmbedderSpec = serde_json::from_value(json!("builtin-bag")).unwrap();
        assert_eq!(named.build(256).unwrap().dimension(), 256);
        let exec: EmbedderSpec = serde_json::from_value(json!({"exec": "my-embedder"})).unwrap();
        assert_eq!(exec, EmbedderSpec::Exec { exec: "my-embedder".into() });
        assert!(EmbedderSpec::Named("bert".into()).build(8).is_err());
    }

    proptest! {
        #[test]
        fn distance_in_unit_interval(x in "[a-z ]{0,40}", y in "[a-z0-9 ]{1,40}") {
            let a = action("t", "o", json!({"q": y}));
            if let Ok(d) = distance(&x, &a, &BagEmbedder::default()) {
                prop_assert!((0.0..=1.0).contains(&d));
                prop_assert!((d - oracle_distance(&x, &action_descriptor(&a), 256)).abs() < 1e-9);
            }
        }

        #[test]
        fn embeddings_are_unit_or_zero(x in "\\PC{0,60}") {
            let v = BagEmbedder::default().embed(&x).unwrap();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
        }

        #[test]
        fn running_max_is_monotone(ds in prop::collection::vec(0.0f64..=1.0, 1..30)) {
            let mut t = DriftTracker::new("s", 0.6);
            let mut prev = 0.0;
            let mut fired = 0;
            for d in &ds {
                if t.update(*d).unwrap() { fired += 1; }
                prop_assert!(t.running_max() >= prev);
                prev = t.running_max();
            }
            prop_assert_eq!(t.running_max(), ds.iter().cloned().fold(0.0, f64::max));
            prop_assert!(fired <= 1);
        }
    }
}
