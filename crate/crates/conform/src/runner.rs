//! Executes scenario fixtures against a harness.

use crate::client::Observed;
use crate::fixture::{Expect, Scenario, Step};
use crate::harness::Harness;
use crate::report::{Check, Outcome};
use serde_json::{json, Value};
use std::collections::HashMap;

/// Compare an observation with its expectation, and check the mock saw the
/// action iff it was permitted.
pub fn judge(h: &Harness, label: &str, session: &str, o: &Observed, want: &Expect, seq: Option<u64>) -> Vec<Check> {
    let mut checks = vec![Check::equal(format!("{label}: decision"), o.decision.as_str(), want.decision.as_str())];
    if let Some(r) = &want.reason {
        checks.push(Check::equal(format!("{label}: reason"), o.reason.as_deref(), Some(r.as_str())));
    }
    if let Some(r) = &want.defer_reason {
        checks.push(Check::equal(format!("{label}: defer reason"), o.defer_reason.as_deref(), Some(r.as_str())));
    }
    if let Some(r) = &want.resolution {
        checks.push(Check::equal(format!("{label}: resolution"), o.resolution.as_deref(), Some(r.as_str())));
    }
    if let Some(seq) = seq.or(o.seq) {
        let permitted = matches!(want.decision.as_str(), "ALLOW" | "MODIFY");
        let seen = h.reached_upstream(session, seq);
        let detail = match (&seen, permitted) {
            (Some(c), false) => format!("upstream received {c}"),
            (None, true) => "no upstream call recorded".to_owned(),
            _ => String::new(),
        };
        checks.push(Check::new(format!("{label}: reaches upstream iff permitted"), seen.is_some() == permitted, detail));
    }
    checks
}

pub async fn run_scenario(h: &Harness, s: &Scenario, prefix: &str) -> Outcome {
    match run_steps(h, s, prefix).await {
        Ok((checks, transcript)) => Outcome::from_checks(&s.id, &s.title, checks, json!({"transcript": transcript})),
        Err(e) if e.downcast_ref::<crate::client::TargetDown>().is_some() => Outcome::skipped(&s.id, &s.title, "target down"),
        Err(e) => Outcome::failed(&s.id, &s.title, e.to_string(), vec![]),
    }
}

async fn run_steps(h: &Harness, s: &Scenario, prefix: &str) -> anyhow::Result<(Vec<Check>, Vec<Value>)> {
    let sid = |name: &str| h.session(&format!("{prefix}{name}"));
    let mut checks = Vec::new();
    let mut transcript = Vec::new();
    let mut saved: HashMap<String, (String, Option<u64>)> = HashMap::new();
    let mut call_seqs: HashMap<String, Vec<u64>> = HashMap::new();
    for (i, step) in s.steps.iter().enumerate() {
        let n = i + 1;
        match step {
            Step::Init { session, original_request } => {
                let session = sid(session);
                let r = h.init(&session, original_request.as_deref()).await?;
                checks.push(Check::new(format!("step {n}: initialize"), r.error.is_none(), format!("{:?}", r.error)));
                transcript.push(json!({"step": n, "op": "init", "session": session, "response": r}));
            }
            Step::Call { session, tool, operation, parameters, expect, save } => {
                let session = sid(session);
                let (r, o) = h.call(&session, tool, operation, Value::Object(parameters.clone())).await?;
                checks.extend(judge(h, &format!("step {n}"), &session, &o, expect, None));
                if let Some(seq) = o.seq {
                    call_seqs.entry(session.clone()).or_default().push(seq);
                }
                if let Some(name) = save {
                    match &o.item_id {
                        Some(id) => {
                            saved.insert(name.clone(), (id.clone(), o.seq));
                        }
                        None => checks.push(Check::new(format!("step {n}: parked item id"), false, "reply names no item")),
                    }
                }
                transcript.push(json!({
                    "step": n, "op": "call", "session": session, "tool": tool, "operation": operation,
                    "parameters": parameters, "response": r, "observed": o
                }));
            }
            Step::AdvanceClock { seconds } => {
                h.clock.advance(chrono::Duration::seconds(*seconds));
                transcript.push(json!({"step": n, "op": "advance_clock", "seconds": seconds}));
            }
            Step::Poll { session, item, expect } => {
                let session = sid(session);
                let (id, seq) = saved.get(item).cloned().ok_or_else(|| anyhow::anyhow!("step {n}: no saved item {item:?}"))?;
                let (r, o) = h.poll(&session, &id).await?;
                let judged_seq = if expect.decision == "PENDING" { None } else { seq };
                checks.extend(judge(h, &format!("step {n}"), &session, &o, expect, judged_seq));
                transcript.push(json!({"step": n, "op": "poll", "session": session, "item_id": id, "response": r, "observed": o}));
            }
            Step::Approve { item, verdict, expect_status } => {
                let (id, _) = saved.get(item).cloned().ok_or_else(|| anyhow::anyhow!("step {n}: no saved item {item:?}"))?;
                let (status, body) = h.decide(&id, verdict, &h.approver_token).await?;
                checks.push(Check::equal(format!("step {n}: approval status"), &status, expect_status));
                transcript.push(json!({"step": n, "op": "approve", "item_id": id, "verdict": verdict, "status": status, "response": body}));
            }
            Step::ExpectDrift { session, threshold, escalation_step } => {
                let session = sid(session);
                let seqs = call_seqs.get(&session).cloned().unwrap_or_default();
                let (c, evidence) = drift_checks(h, &session, &seqs, *threshold, *escalation_step).await?;
                checks.extend(c.into_iter().map(|mut c| {
                    c.name = format!("step {n}: {}", c.name);
                    c
                }));
                transcript.push(json!({"step": n, "op": "expect_drift", "session": session, "observed": evidence}));
            }
        }
    }
    Ok((checks, transcript))
}

/// Drift as recorded in the first receipt of each call, and the
/// escalation events.
pub async fn drift_checks(
    h: &Harness,
    session: &str,
    call_seqs: &[u64],
    threshold: f64,
    escalation_step: u64,
) -> anyhow::Result<(Vec<Check>, Value)> {
    let receipts = h.receipts(session).await?;
    let mut drift = Vec::new();
    for seq in call_seqs {
        let first = receipts.iter().find(|r| r["action"]["seq"] == *seq);
        drift.push(first.and_then(|r| r["context"]["cumulative_drift"].as_f64()));
    }
    let values: Vec<f64> = drift.iter().flatten().copied().collect();
    let mut checks = vec![Check::new(
        "every call records cumulative drift",
        values.len() == call_seqs.len() && !values.is_empty(),
        format!("{drift:?}"),
    )];
    let monotone = values.windows(2).all(|w| w[1] >= w[0]);
    checks.push(Check::new("running maximum never decreases", monotone, format!("{values:?}")));
    let last = values.last().copied().unwrap_or(0.0);
    checks.push(Check::new(format!("drift crosses {threshold}"), last > threshold, format!("final {last}")));
    let first_over = values.iter().position(|d| *d > threshold).map(|i| i as u64 + 1);
    checks.push(Check::equal("first call over threshold", &first_over, &Some(escalation_step)));
    let events = h.events(session, Some("DRIFT_ESCALATION")).await?;
    let at: Vec<Option<u64>> = events
        .iter()
        .map(|e| e["attributes"]["seq"].as_str().and_then(|s| s.parse::<u64>().ok()))
        .map(|seq| seq.and_then(|s| call_seqs.iter().position(|c| *c == s).map(|i| i as u64 + 1)))
        .collect();
    checks.push(Check::equal("one escalation, at the fixture step", &at, &vec![Some(escalation_step)]));
    checks.push(Check::new(
        "escalation precedes the final step",
        escalation_step < call_seqs.len() as u64,
        format!("step {escalation_step} of {}", call_seqs.len()),
    ));
    Ok((checks, json!({"cumulative_drift": drift, "escalation_events": events})))
}
