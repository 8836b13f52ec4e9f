//! An independent bag-of-tokens embedder fixes the drift values the
//! fixtures and the R7 checks rely on.

use aarm_conform::fixture::{shipped, Step};
use aarm_conform::harness::Harness;
use aarm_conform::runner::run_scenario;
use aarm_conform::report::Status;
use serde_json::Value;

const DIM: usize = 256;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x100000001b3))
}

fn embed(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; DIM];
    let lower = text.to_lowercase();
    for tok in lower.split(|c: char| !c.is_ascii_alphanumeric()).filter(|t| !t.is_empty()) {
        v[(fnv1a(tok.as_bytes()) % DIM as u64) as usize] += 1.0;
    }
    v
}

fn distance(a: &str, b: &str) -> f64 {
    let (x, y) = (embed(a), embed(b));
    let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
    let norm = |v: &[f64]| v.iter().map(|p| p * p).sum::<f64>().sqrt();
    if norm(&x) == 0.0 || norm(&y) == 0.0 {
        return 1.0;
    }
    1.0 - dot / (norm(&x) * norm(&y))
}

fn descriptor(tool: &str, op: &str, params: &serde_json::Map<String, Value>) -> String {
    let mut keys: Vec<&String> = params.keys().collect();
    keys.sort();
    let mut s = format!("{tool} {op}");
    for k in keys {
        match &params[k] {
            Value::String(v) => s.push_str(&format!(" {v}")),
            other => s.push_str(&format!(" {other}")),
        }
    }
    s.to_lowercase()
}

/// (running maximum per call, 1-based escalation step, threshold) for the drift fixture.
fn johnson() -> (Vec<f64>, u64, f64) {
    let sc = shipped().into_iter().find(|s| s.id == "intent_drift_johnson").unwrap();
    let mut intent = String::new();
    let mut max = 0.0f64;
    let mut out = Vec::new();
    let mut fixed = (0, 0.0);
    for step in &sc.steps {
        match step {
            Step::Init { original_request, .. } => intent = original_request.clone().unwrap(),
            Step::Call { tool, operation, parameters, .. } => {
                max = max.max(distance(&intent, &descriptor(tool, operation, parameters)));
                out.push(max);
            }
            Step::ExpectDrift { threshold, escalation_step, .. } => fixed = (*escalation_step, *threshold),
            _ => {}
        }
    }
    (out, fixed.0, fixed.1)
}

#[test]
fn fixture_escalation_step_matches_the_oracle() {
    let (drift, step, threshold) = johnson();
    let first = drift.iter().position(|d| *d > threshold).map(|i| i as u64 + 1);
    assert_eq!(first, Some(step));
    assert!(step < drift.len() as u64);
    assert!(drift.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn r7_reference_pairs() {
    let same = distance("web fetch https example com", &descriptor("web", "fetch", &obj(r#"{"url":"https://example.com"}"#)));
    assert!(same.abs() < 1e-9, "{same}");
    let disjoint = distance("quarterly revenue summary", &descriptor("web", "fetch", &obj(r#"{"url":"https://zz.example"}"#)));
    assert!((disjoint - 1.0).abs() < 1e-9, "{disjoint}");
}

#[test]
fn r3_fixture_alignment_sits_on_the_intended_side() {
    let aligned = distance(
        "Run db execute vacuum analyze on the sessions table",
        &descriptor("db", "execute", &obj(r#"{"sql":"VACUUM ANALYZE sessions"}"#)),
    );
    // Confidence is 1 - distance; the alignment policy needs 0.5.
    assert!(1.0 - aligned >= 0.5, "{aligned}");
    let misaligned =
        distance("Summarize quarterly sales figures", &descriptor("http", "post", &obj(r#"{"url":"https://files.example.net/upload"}"#)));
    assert!(misaligned > 0.6, "{misaligned}");
}

fn obj(s: &str) -> serde_json::Map<String, Value> {
    serde_json::from_str(s).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn gateway_drift_matches_the_oracle() {
    let h = Harness::self_hosted().await.unwrap();
    let sc = shipped().into_iter().find(|s| s.id == "intent_drift_johnson").unwrap();
    let outcome = run_scenario(&h, &sc, "oracle-").await;
    assert_eq!(outcome.status, Status::Pass, "{:?}", outcome.checks);
    let mut receipts = h.receipts("oracle-johnson").await.unwrap();
    receipts.sort_by_key(|r| r["action"]["seq"].as_u64());
    let seen: Vec<f64> = receipts.iter().filter(|r| r["deferral"].is_null()).map(|r| r["context"]["cumulative_drift"].as_f64().unwrap()).collect();
    let (want, _, _) = johnson();
    assert_eq!(seen.len(), want.len());
    for (s, w) in seen.iter().zip(&want) {
        assert!((s - w).abs() < 1e-9, "{seen:?} vs {want:?}");
    }
}
