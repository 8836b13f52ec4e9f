//! One verification procedure per requirement, using only wire-level and
//! file-level observations of the target.

use crate::client::{observe, Observed, TargetDown};
use crate::fixture::{self, Expect};
use crate::harness::{identity, launch, Harness};
use crate::report::{Check, Outcome};
use crate::runner;
use aarm_core::model::format_utc;
use aarm_core::receipt::{verify_receipts_text, PublicKeys};
use aarm_core::telemetry::SinkConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::future::Future;
use std::time::{Duration, Instant};

pub const REQUIREMENTS: &[(&str, &str)] = &[
    ("R1", "Pre-execution interception"),
    ("R2", "Context accumulation"),
    ("R3", "Policy evaluation with intent alignment"),
    ("R4", "Authorization decisions and deferral"),
    ("R5", "Tamper-evident receipts"),
    ("R6", "Identity binding"),
    ("R7", "Semantic distance tracking"),
    ("R8", "Telemetry export"),
    ("R9", "Least privilege enforcement"),
];

pub const TAMPER_TRIALS: usize = 100;
pub const R5_SESSIONS: usize = 5;
const RNG_SEED: u64 = 0x5EED;

pub fn title(id: &str) -> Option<&'static str> {
    REQUIREMENTS.iter().find(|(r, _)| *r == id).map(|(_, t)| *t)
}

/// Run one requirement. An unreachable target yields SKIPPED, never PASS.
pub async fn run(h: &Harness, id: &str) -> Outcome {
    let title = title(id).unwrap_or("unknown requirement");
    if id == "R9" {
        return Outcome::skipped(id, title, "out of scope");
    }
    if h.client.probe().await.is_err() {
        return Outcome::skipped(id, title, "target down");
    }
    let result = match id {
        "R1" => r1(h).await,
        "R2" => r2(h).await,
        "R3" => r3(h).await,
        "R4" => r4(h).await,
        "R5" => r5(h).await,
        "R6" => r6(h).await,
        "R7" => r7(h).await,
        "R8" => r8(h).await,
        _ => return Outcome::failed(id, title, format!("no such requirement {id}"), vec![]),
    };
    match result {
        Ok((checks, evidence)) => Outcome::from_checks(id, title, checks, evidence),
        Err(e) if e.downcast_ref::<TargetDown>().is_some() => Outcome::skipped(id, title, "target down"),
        Err(e) => Outcome::failed(id, title, format!("{e:#}"), vec![]),
    }
}

type Checked = anyhow::Result<(Vec<Check>, Value)>;

fn expect(decision: &str) -> Expect {
    Expect { decision: decision.into(), ..Expect::default() }
}

fn str_at<'a>(v: &'a Value, path: &[&str]) -> Option<&'a str> {
    path.iter().try_fold(v, |v, k| v.get(*k)).and_then(Value::as_str)
}

fn receipt<'a>(receipts: &'a [Value], id: Option<&str>) -> Option<&'a Value> {
    id.and_then(|id| receipts.iter().find(|r| r["receipt_id"] == id))
}

async fn r1(h: &Harness) -> Checked {
    let s = h.session("r1");
    h.open(&s, None).await?;
    let started = Instant::now();
    let (_, o) = h.call(&s, "files", "delete", json!({"path": "/srv/reports/q3.xlsx"})).await?;
    let elapsed = started.elapsed();
    let receipts = h.receipts(&s).await?;
    let upstream = h.upstream(&s);
    let mut checks = vec![Check::equal("decision", o.decision.as_str(), "DENY")];
    checks.push(Check::new("zero upstream calls", upstream.is_empty(), format!("{upstream:?}")));
    checks.push(Check::equal("one receipt", &receipts.len(), &1));
    if let Some(r) = receipts.first() {
        checks.push(Check::equal("receipt decision", str_at(r, &["decision", "kind"]), Some("DENY")));
        let named = r["decision"]["matched_policies"].as_array().is_some_and(|m| m.iter().any(|p| p == "deny_file_deletion"));
        checks.push(Check::new("receipt names the policy", named, r["decision"]["matched_policies"].to_string()));
    }
    checks.push(Check::new("completes within 5 s", elapsed < Duration::from_secs(5), ""));
    Ok((checks, json!({"receipts": receipts, "upstream_calls": upstream})))
}

async fn r2(h: &Harness) -> Checked {
    let s = h.session("r2");
    h.open(&s, None).await?;
    h.call(&s, "crm", "query", json!({"object": "customers", "region": "emea"})).await?;
    h.call(&s, "web", "fetch", json!({"url": "https://status.example.com"})).await?;
    let (_, third) = h.call(&s, "secrets", "rotate", json!({"key": "billing-api-token"})).await?;
    let mut checks = vec![Check::equal("third action parks for review", third.decision.as_str(), "DEFER")];
    let pending = h.pending(&s).await?;
    let item = pending.iter().find(|p| Some(p["item_id"].as_str().unwrap_or_default()) == third.item_id.as_deref());
    match item {
        Some(item) => {
            let history = item["context"]["history"].as_array().map(Vec::len);
            checks.push(Check::equal("context lists two prior actions", &history, &Some(2)));
            let labels = &item["context"]["data_classifications"];
            let pii = labels.as_array().is_some_and(|l| l.iter().any(|c| c == "PII"));
            checks.push(Check::new("context carries the PII label", pii, labels.to_string()));
        }
        None => checks.push(Check::new("pending item visible", false, "item missing from /v1/pending")),
    }
    let (tamper_checks, tamper) = tamper_trials(h, &s).await?;
    checks.extend(tamper_checks);
    Ok((checks, json!({"pending": pending, "tamper": tamper})))
}

/// Flip one byte of the stored ledger at a time and ask the target to
/// verify; each trial restores the file before the next.
async fn tamper_trials(h: &Harness, session: &str) -> Checked {
    let Some(dir) = &h.data_dir else {
        return Ok((vec![Check::new("ledger tamper trials", false, "the target's data directory was not given")], Value::Null));
    };
    let path = dir.join(format!("{session}.ctx.jsonl"));
    let original = std::fs::read(&path)?;
    let verify = format!("/v1/sessions/{session}/verify");
    let (_, before) = h.client.get(&verify).await?;
    let mut checks = vec![Check::equal("untouched chain verifies", before["status"].as_str(), Some("ok"))];
    let mut rng = ChaCha8Rng::seed_from_u64(RNG_SEED);
    let mut missed = Vec::new();
    let result: anyhow::Result<()> = async {
        for _ in 0..TAMPER_TRIALS {
            let pos = rng.gen_range(0..original.len());
            let mask: u8 = rng.gen_range(1..=255);
            let line = original[..pos].iter().filter(|b| **b == b'\n').count() as u64;
            let mut bytes = original.clone();
            bytes[pos] ^= mask;
            std::fs::write(&path, &bytes)?;
            let (_, v) = h.client.get(&verify).await?;
            let seq = v["seq"].as_u64();
            // Line n holds seq n; detection may land on the successor.
            if v["status"] != "corrupt" || seq.is_none_or(|s| s > line + 1) {
                missed.push(json!({"offset": pos, "mask": mask, "line_seq": line, "verdict": v}));
            }
        }
        Ok(())
    }
    .await;
    std::fs::write(&path, &original)?;
    result?;
    checks.push(Check::new(
        format!("{TAMPER_TRIALS} single-byte flips detected at or before the successor seq"),
        missed.is_empty(),
        format!("{} missed", missed.len()),
    ));
    let (_, after) = h.client.get(&verify).await?;
    checks.push(Check::equal("restored chain verifies", after["status"].as_str(), Some("ok")));
    Ok((checks, json!({"trials": TAMPER_TRIALS, "missed": missed})))
}

async fn r3(h: &Harness) -> Checked {
    struct Row {
        name: &'static str,
        intent: Option<&'static str>,
        tool: &'static str,
        op: &'static str,
        params: Value,
        want: Expect,
    }
    let rows = [
        Row {
            name: "forbidden",
            intent: Some("db execute drop database legacy"),
            tool: "db",
            op: "execute",
            params: json!({"sql": "DROP DATABASE legacy"}),
            want: Expect { reason: Some("Forbidden: DROP DATABASE".into()), ..expect("DENY") },
        },
        Row {
            name: "misaligned",
            intent: Some("Summarize quarterly sales figures"),
            tool: "http",
            op: "post",
            params: json!({"url": "https://files.example.net/upload"}),
            want: Expect { reason: Some("Action drifts from the stated request".into()), ..expect("DENY") },
        },
        Row {
            name: "aligned",
            intent: Some("Run db execute vacuum analyze on the sessions table"),
            tool: "db",
            op: "execute",
            params: json!({"sql": "VACUUM ANALYZE sessions"}),
            want: expect("STEP_UP"),
        },
        Row {
            name: "indeterminate",
            intent: None,
            tool: "secrets",
            op: "rotate",
            params: json!({"key": "payments-signing-key"}),
            want: Expect { defer_reason: Some("MISSING_CONTEXT_FIELD".into()), ..expect("DEFER") },
        },
        Row {
            name: "standard-allow",
            intent: None,
            tool: "web",
            op: "fetch",
            params: json!({"url": "https://example.com/pricing"}),
            want: expect("ALLOW"),
        },
        Row {
            name: "standard-deny",
            intent: None,
            tool: "files",
            op: "delete",
            params: json!({"path": "/srv/archive"}),
            want: Expect { reason: Some("File deletion is not permitted".into()), ..expect("DENY") },
        },
    ];
    let mut checks = Vec::new();
    let mut evidence = Vec::new();
    for row in rows {
        let s = h.session(&format!("r3-{}", row.name));
        h.open(&s, row.intent).await?;
        let (_, o) = h.call(&s, row.tool, row.op, row.params.clone()).await?;
        checks.extend(runner::judge(h, row.name, &s, &o, &row.want, None));
        evidence.push(json!({"row": row.name, "intent": row.intent, "tool": row.tool, "operation": row.op, "observed": o}));
    }
    Ok((checks, json!({"rows": evidence})))
}

/// A timed-out item must never reach the tool.
pub fn no_fail_open(upstream: &[Value]) -> Check {
    match upstream.first() {
        None => Check::new("timed-out action never reached the tool", true, ""),
        Some(call) => Check::new("timed-out action never reached the tool", false, format!("fail-open: upstream received {call}")),
    }
}

async fn r4(h: &Harness) -> Checked {
    let mut checks = Vec::new();
    let mut evidence = serde_json::Map::new();

    // Dependent actions wait; independent ones proceed.
    let s = h.session("r4-dependency");
    h.open(&s, None).await?;
    let (_, drop) = h.call(&s, "db", "execute", json!({"sql": "DROP TABLE user_sessions"})).await?;
    checks.extend(runner::judge(h, "destructive statement", &s, &drop, &expect("STEP_UP"), None));
    let (_, dep) = h.call(&s, "db", "query", json!({"sql": "SELECT count(*) FROM user_sessions"})).await?;
    let want = Expect { defer_reason: Some("DEPENDS_ON_DEFERRED".into()), ..expect("DEFER") };
    checks.extend(runner::judge(h, "dependent query", &s, &dep, &want, None));
    let (_, indep) = h.call(&s, "web", "fetch", json!({"url": "https://example.com/changelog"})).await?;
    checks.extend(runner::judge(h, "independent fetch", &s, &indep, &expect("ALLOW"), None));

    // Approval requires a mapped approver, then releases the chain.
    if let Some(item) = &drop.item_id {
        let (status, _) = h.decide(item, "ALLOW", "not-an-approver").await?;
        checks.push(Check::equal("unknown approver token refused", &status, &403));
        let (status, _) = h.decide(item, "ALLOW", &h.approver_token).await?;
        checks.push(Check::equal("approval accepted", &status, &200));
        let (_, o) = h.poll(&s, item).await?;
        let want = Expect { resolution: Some("human_allow".into()), ..expect("ALLOW") };
        checks.extend(runner::judge(h, "approved statement", &s, &o, &want, drop.seq));
        if let Some(dep_item) = &dep.item_id {
            let (_, o) = h.poll(&s, dep_item).await?;
            let want = Expect { resolution: Some("re-evaluation".into()), ..expect("ALLOW") };
            checks.extend(runner::judge(h, "released dependent query", &s, &o, &want, dep.seq));
        }
    }
    evidence.insert("dependency".into(), json!({"drop": drop, "dependent": dep, "independent": indep, "upstream_calls": h.upstream(&s)}));

    // Cascades are bounded.
    let s = h.session("r4-cascade");
    h.open(&s, None).await?;
    let mut parked = Vec::new();
    for i in 0..h.cascade_limit {
        let (_, o) = h.call(&s, "secrets", "rotate", json!({"key": format!("service-key-{i}")})).await?;
        parked.push(o.decision);
    }
    let all_deferred = parked.iter().all(|d| d == "DEFER");
    checks.push(Check::new(format!("{} concurrent defers park", h.cascade_limit), all_deferred, format!("{parked:?}")));
    let (_, over) = h.call(&s, "secrets", "rotate", json!({"key": "service-key-overflow"})).await?;
    let want = Expect { reason: Some("cascade bound exceeded".into()), ..expect("DENY") };
    checks.extend(runner::judge(h, "defer beyond the bound", &s, &over, &want, None));
    evidence.insert("cascade".into(), json!({"parked": parked, "overflow": over}));

    // Timeouts deny.
    let s = h.session("r4-timeout");
    h.open(&s, None).await?;
    let now = h.now();
    let (_, parked) = h.call(&s, "secrets", "rotate", json!({"key": "warehouse-password"})).await?;
    checks.extend(runner::judge(h, "ambiguous rotation", &s, &parked, &expect("DEFER"), None));
    let deadline = format_utc(now + chrono::Duration::seconds(120));
    checks.push(Check::equal("deadline is 120 s out", parked.deadline.as_deref(), Some(deadline.as_str())));
    h.clock.advance(chrono::Duration::seconds(121));
    let mut polled = Observed::default();
    if let Some(item) = &parked.item_id {
        polled = h.poll(&s, item).await?.1;
        let want = Expect { resolution: Some("timeout".into()), ..expect("DENY") };
        checks.extend(runner::judge(h, "after the deadline", &s, &polled, &want, parked.seq));
    }
    let receipts = h.receipts(&s).await?;
    let follow = receipts.iter().find(|r| r["deferral"]["parent_receipt_id"].as_str() == parked.receipt_id.as_deref());
    checks.push(Check::new("follow-up receipt links its parent", follow.is_some() && parked.receipt_id.is_some(), ""));
    if let Some(f) = follow {
        checks.push(Check::equal("follow-up decision", str_at(f, &["decision", "kind"]), Some("DENY")));
        checks.push(Check::equal("follow-up resolution", str_at(f, &["deferral", "resolution_method"]), Some("timeout")));
    }
    let upstream = h.upstream(&s);
    checks.push(no_fail_open(&upstream));
    evidence.insert("timeout".into(), json!({"parked": parked, "polled": polled, "receipts": receipts, "upstream_calls": upstream}));
    Ok((checks, Value::Object(evidence)))
}

/// The mixed workload: every template decides without parking.
pub fn r5_templates() -> Vec<(&'static str, &'static str, Value, &'static str)> {
    vec![
        ("web", "fetch", json!({"url": "https://example.com/news"}), "ALLOW"),
        ("web", "search", json!({"query": "incident postmortems", "limit": 50}), "MODIFY"),
        ("crm", "query", json!({"object": "customers", "account": "Acme"}), "ALLOW"),
        ("email", "send", json!({"to": "buyer@external.org", "body": "account list"}), "DENY"),
        ("email", "send", json!({"to": "bob@company.com", "body": "weekly update"}), "ALLOW"),
        ("files", "delete", json!({"path": "/srv/backups"}), "DENY"),
        ("db", "execute", json!({"sql": "DROP DATABASE production"}), "DENY"),
        ("ftp", "put", json!({"path": "/outbox/data.csv"}), "DENY"),
        ("fail", "run", json!({"job": "nightly"}), "ALLOW"),
        ("db", "query", json!({"sql": "SELECT id FROM invoices"}), "ALLOW"),
    ]
}

async fn r5(h: &Harness) -> Checked {
    let mut checks = Vec::new();
    let mut sessions = Vec::new();
    let mut wrong = Vec::new();
    for i in 1..=R5_SESSIONS {
        let s = h.session(&format!("r5-{i}"));
        h.open(&s, None).await?;
        for (tool, op, params, want) in r5_templates() {
            let (_, o) = h.call(&s, tool, op, params).await?;
            if o.decision != want {
                wrong.push(format!("{s} {tool}.{op}: {} (want {want})", o.decision));
            }
        }
        sessions.push(s);
    }
    checks.push(Check::new("workload decisions", wrong.is_empty(), wrong.join("; ")));
    let (status, text) = h.client.get_text("/receipts.jsonl").await?;
    anyhow::ensure!(status == 200, "GET /receipts.jsonl returned HTTP {status}");
    let (status, keys) = h.client.get("/keys.json").await?;
    anyhow::ensure!(status == 200, "GET /keys.json returned HTTP {status}");
    let keys = PublicKeys::from_json(&keys)?;
    let lines: Vec<&str> = text
        .lines()
        .filter(|l| serde_json::from_str::<Value>(l).is_ok_and(|v| sessions.iter().any(|s| v["context"]["session_id"] == s.as_str())))
        .collect();
    let total = R5_SESSIONS * r5_templates().len();
    checks.push(Check::equal("one receipt per action", &lines.len(), &total));
    let mut missing = Vec::new();
    for l in &lines {
        let v: Value = serde_json::from_str(l)?;
        for group in ["receipt_id", "action", "context", "identity", "decision", "outcome", "issued_at", "signature"] {
            if v.get(group).is_none_or(Value::is_null) {
                missing.push(format!("{}: {group}", v["receipt_id"]));
            }
        }
    }
    checks.push(Check::new("every field group present", missing.is_empty(), missing.join("; ")));
    let verdicts = verify_receipts_text(&lines.join("\n"), &keys);
    let valid = verdicts.iter().filter(|v| v.result.is_ok()).count();
    checks.push(Check::new("offline verification", valid == total && verdicts.len() == total, format!("{valid}/{total} valid")));
    let mut rng = ChaCha8Rng::seed_from_u64(RNG_SEED);
    let mut undetected = Vec::new();
    for l in &lines {
        let mut bytes = l.as_bytes().to_vec();
        let pos = rng.gen_range(0..bytes.len());
        bytes[pos] ^= rng.gen_range(1..=255u8);
        let mutated = String::from_utf8_lossy(&bytes).into_owned();
        if verify_receipts_text(&mutated, &keys).iter().all(|v| v.result.is_ok()) {
            undetected.push(pos);
        }
    }
    let detected = lines.len() - undetected.len();
    checks.push(Check::new(
        "single-byte mutations detected",
        undetected.is_empty() && lines.len() == total,
        format!("{detected}/{} detected", lines.len()),
    ));
    Ok((checks, json!({"sessions": sessions, "receipts": lines.len(), "valid": valid, "mutations_detected": detected})))
}

const IDENTITY_LAYERS: &[&str] = &["human_principal", "service_identity", "agent_identity", "session_id"];

async fn r6(h: &Harness) -> Checked {
    let mut checks = Vec::new();
    for layer in &IDENTITY_LAYERS[..3] {
        let s = h.session(&format!("r6-no-{layer}"));
        let mut id = identity(&s);
        id.as_object_mut().expect("object").remove(*layer);
        let r = h.client.rpc("session/initialize", json!({"session_id": s, "identity": id})).await?;
        let code = r.error.as_ref().map(|e| e.code);
        checks.push(Check::equal(format!("session without {layer} refused"), &code, &Some(aarm_gateway::rpc::IDENTITY_REQUIRED)));
    }
    let s = h.session("r6");
    h.open(&s, None).await?;
    let mut partial = identity(&s);
    partial["human_principal"] = json!("");
    let r = h
        .client
        .rpc("tools/call", json!({"session_id": s, "tool": "crm", "operation": "query", "parameters": {"object": "accounts"}, "identity": partial}))
        .await?;
    let denied = observe(&r);
    checks.extend(runner::judge(h, "action without a human principal", &s, &denied, &expect("DENY"), None));
    let (_, ok) = h.call(&s, "web", "fetch", json!({"url": "https://example.com/help"})).await?;
    checks.extend(runner::judge(h, "fully identified action", &s, &ok, &expect("ALLOW"), None));

    let (status, all) = h.client.get("/v1/receipts").await?;
    anyhow::ensure!(status == 200, "GET /v1/receipts returned HTTP {status}");
    let prefix = h.session("");
    let receipts: Vec<&Value> = all
        .as_array()
        .into_iter()
        .flatten()
        .filter(|r| r["context"]["session_id"].as_str().is_some_and(|s| s.starts_with(&prefix)))
        .collect();
    let mut bad = Vec::new();
    for r in &receipts {
        let id = &r["identity"];
        let carries = IDENTITY_LAYERS.iter().all(|k| id[*k].is_string()) && id["privilege_scope"].is_array();
        let is_denied = r["receipt_id"].as_str() == denied.receipt_id.as_deref();
        let complete = is_denied || IDENTITY_LAYERS.iter().all(|k| id[*k].as_str().is_some_and(|v| !v.is_empty()));
        if !carries || !complete {
            bad.push(r["receipt_id"].clone());
        }
    }
    checks.push(Check::new(
        "receipts carry four identity layers and privilege scope",
        bad.is_empty() && !receipts.is_empty(),
        format!("{} of {} incomplete {bad:?}", bad.len(), receipts.len()),
    ));
    let denied_receipt = receipts.iter().find(|r| r["receipt_id"].as_str() == denied.receipt_id.as_deref()).copied().cloned();
    Ok((checks, json!({"denied": denied, "denied_receipt": denied_receipt, "receipts_checked": receipts.len()})))
}

async fn first_drift(h: &Harness, name: &str, intent: &str, params: Value) -> anyhow::Result<(Option<f64>, Observed)> {
    let s = h.session(name);
    h.open(&s, Some(intent)).await?;
    let (_, o) = h.call(&s, "web", "fetch", params).await?;
    let receipts = h.receipts(&s).await?;
    let drift = receipt(&receipts, o.receipt_id.as_deref()).and_then(|r| r["context"]["cumulative_drift"].as_f64());
    Ok((drift, o))
}

async fn r7(h: &Harness) -> Checked {
    let mut checks = Vec::new();
    let (same, _) = first_drift(h, "r7-same", "web fetch https example com", json!({"url": "https://example.com"})).await?;
    checks.push(Check::new("identical text has zero distance", same.is_some_and(|d| d.abs() <= 1e-9), format!("{same:?}")));
    let (disjoint, _) = first_drift(h, "r7-disjoint", "quarterly revenue summary", json!({"url": "https://zz.example"})).await?;
    checks.push(Check::new(
        "disjoint text has unit distance",
        disjoint.is_some_and(|d| (d - 1.0).abs() <= 1e-9),
        format!("{disjoint:?}"),
    ));
    let johnson = fixture::shipped().into_iter().find(|s| s.id == "intent_drift_johnson").expect("shipped scenario");
    let outcome = runner::run_scenario(h, &johnson, "r7-").await;
    if let Some(reason) = &outcome.reason {
        checks.push(Check::new("drift scenario ran", false, reason.clone()));
    }
    checks.extend(outcome.checks.into_iter().map(|mut c| {
        c.name = format!("drift scenario {}", c.name);
        c
    }));
    Ok((checks, json!({"same": same, "disjoint": disjoint, "scenario": outcome.evidence})))
}

/// The R8 session script; returns the session's receipts.
async fn r8_script(h: &Harness, session: &str) -> anyhow::Result<Vec<Value>> {
    h.open(session, None).await?;
    h.call(session, "web", "fetch", json!({"url": "https://example.com/status"})).await?;
    h.call(session, "files", "delete", json!({"path": "/srv/logs"})).await?;
    h.call(session, "db", "execute", json!({"sql": "DROP DATABASE analytics"})).await?;
    let (_, defer) = h.call(session, "secrets", "rotate", json!({"key": "ci-token"})).await?;
    let (_, step_up) = h.call(session, "deploy", "release", json!({"service": "billing", "version": "2.4.1"})).await?;
    h.clock.advance(chrono::Duration::seconds(301));
    for item in [&defer.item_id, &step_up.item_id].into_iter().flatten() {
        h.poll(session, item).await?;
    }
    h.receipts(session).await
}

async fn r8(h: &Harness) -> Checked {
    let s = h.session("r8");
    let receipts = r8_script(h, &s).await?;
    let decisions = h.events(&s, Some("DECISION")).await?;
    let created = h.events(&s, Some("PENDING_CREATED")).await?;
    let mut checks = vec![Check::equal("one DECISION event per receipt", &decisions.len(), &receipts.len())];
    let mut from_events: Vec<&str> = decisions.iter().filter_map(|e| e["receipt_id"].as_str()).collect();
    let mut from_receipts: Vec<&str> = receipts.iter().filter_map(|r| r["receipt_id"].as_str()).collect();
    from_events.sort_unstable();
    from_receipts.sort_unstable();
    checks.push(Check::equal("DECISION events name each receipt", &from_events, &from_receipts));
    let parked: Vec<&str> = receipts
        .iter()
        .filter(|r| matches!(str_at(r, &["decision", "kind"]), Some("DEFER" | "STEP_UP")))
        .filter_map(|r| r["receipt_id"].as_str())
        .collect();
    let mut created_ids: Vec<&str> = created.iter().filter_map(|e| e["receipt_id"].as_str()).collect();
    created_ids.sort_unstable();
    let mut parked_sorted = parked.clone();
    parked_sorted.sort_unstable();
    checks.push(Check::equal("PENDING_CREATED per DEFER and STEP_UP", &created_ids, &parked_sorted));
    checks.push(Check::equal("parked decisions in the script", &parked.len(), &2));
    let severity = |sql_forbidden: bool| {
        decisions
            .iter()
            .find(|e| {
                receipt(&receipts, e["receipt_id"].as_str()).is_some_and(|r| {
                    r["decision"]["kind"] == "DENY"
                        && r["deferral"].is_null()
                        && (r["action"]["tool"] == "db") == sql_forbidden
                })
            })
            .and_then(|e| e["severity"].as_str())
    };
    checks.push(Check::equal("forbidden denial is CRITICAL", &severity(true), &Some("CRITICAL")));
    checks.push(Check::equal("ordinary denial is WARN", &severity(false), &Some("WARN")));
    let mut evidence = json!({"receipts": receipts.len(), "decision_events": decisions.len(), "pending_created": created.len()});
    if h.self_hosted {
        let (c, e) = sink_independence().await?;
        checks.extend(c);
        evidence["sink_independence"] = e;
    } else {
        evidence["sink_independence"] = json!("not run: needs a harness-hosted gateway");
    }
    Ok((checks, evidence))
}

fn unsigned(receipts: &[Value]) -> Vec<Value> {
    receipts
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.as_object_mut().map(|o| o.remove("signature"));
            r
        })
        .collect()
}

async fn wait_for<F, Fut>(deadline: Duration, mut probe: F) -> bool
where
    F: FnMut() -> Fut,
    Fut: Future<Output = bool>,
{
    let start = Instant::now();
    loop {
        if probe().await {
            return true;
        }
        if start.elapsed() > deadline {
            return false;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

/// Run the script on two fresh gateways, one exporting to a file and one
/// to a dead endpoint, and compare what they decided.
async fn sink_independence() -> Checked {
    let live = launch(None).await?;
    let dead = launch(Some(SinkConfig::Http("http://127.0.0.1:9/events".into()))).await?;
    let mut runs = Vec::new();
    for inst in [&live, &dead] {
        let h = Harness::attach(inst);
        runs.push(unsigned(&r8_script(&h, "r8-sink").await?));
    }
    let same = runs[0] == runs[1];
    let first_diff = runs[0].iter().zip(&runs[1]).position(|(a, b)| a != b);
    let mut checks = vec![Check::new(
        "a dead sink changes no receipt",
        same && !runs[0].is_empty(),
        format!("{} vs {} receipts, first difference at {first_diff:?}", runs[0].len(), runs[1].len()),
    )];
    let events = live.dir().join("events.jsonl");
    let want = runs[0].len();
    let delivered = wait_for(Duration::from_secs(5), || {
        let events = events.clone();
        async move {
            std::fs::read_to_string(&events)
                .map(|t| t.lines().filter(|l| l.contains("\"DECISION\"") && l.contains("r8-sink")).count() >= want)
                .unwrap_or(false)
        }
    })
    .await;
    checks.push(Check::new("file sink receives the events within 5 s", delivered, ""));
    Ok((checks, json!({"receipts_compared": want, "identical": same})))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fail_open_is_cited() {
        assert!(no_fail_open(&[]).passed);
        let call = json!({"session_id": "s", "seq": 1, "tool": "secrets", "operation": "rotate"});
        let c = no_fail_open(&[call]);
        assert!(!c.passed);
        assert!(c.detail.contains("fail-open") && c.detail.contains("\"rotate\""));
    }

    #[test]
    fn titles_cover_r1_to_r9() {
        let ids: Vec<&str> = REQUIREMENTS.iter().map(|(id, _)| *id).collect();
        assert_eq!(ids, ["R1", "R2", "R3", "R4", "R5", "R6", "R7", "R8", "R9"]);
    }
}
