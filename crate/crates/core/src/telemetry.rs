//! Structured security events.
//!
//! Events are kept in memory for batch export and handed to a background
//! thread for delivery, so a slow or dead sink never delays enforcement.
//! Undeliverable events go to a spill file and are retried on the next
//! successful delivery.

use crate::clock::Clock;
use crate::ids::IdGen;
use crate::model::{format_utc, DecisionKind};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

pub const SPILL_FILE: &str = "telemetry.spill.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Decision,
    PendingCreated,
    PendingResolved,
    DriftEscalation,
    ChainVerification,
    ConfigLoaded,
    /// A verdict was submitted with a token not mapped to any approver.
    ApproverRejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Severity {
    Info,
    Warn,
    Critical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryEvent {
    pub event_id: String,
    pub kind: EventKind,
    pub time: String,
    pub session_id: Option<String>,
    pub receipt_id: Option<String>,
    pub decision: Option<DecisionKind>,
    pub severity: Severity,
    pub attributes: BTreeMap<String, String>,
}

/// An event before the hub stamps id and time.
#[derive(Debug, Clone, PartialEq)]
pub struct EventDraft {
    pub kind: EventKind,
    pub session_id: Option<String>,
    pub receipt_id: Option<String>,
    pub decision: Option<DecisionKind>,
    pub severity: Severity,
    pub attributes: BTreeMap<String, String>,
}

impl EventDraft {
    fn new(kind: EventKind, session_id: Option<&str>, severity: Severity) -> Self {
        EventDraft {
            kind,
            session_id: session_id.map(str::to_owned),
            receipt_id: None,
            decision: None,
            severity,
            attributes: BTreeMap::new(),
        }
    }

    pub fn decision(session_id: &str, receipt_id: &str, kind: DecisionKind, forbidden: bool) -> Self {
        let severity = match kind {
            DecisionKind::Deny if forbidden => Severity::Critical,
            DecisionKind::Deny => Severity::Warn,
            _ => Severity::Info,
        };
        let mut e = EventDraft::new(EventKind::Decision, Some(session_id), severity);
        e.receipt_id = Some(receipt_id.to_owned());
        e.decision = Some(kind);
        e
    }

    pub fn pending_created(session_id: &str, receipt_id: &str, kind: DecisionKind, item_id: &str) -> Self {
        let mut e = EventDraft::new(EventKind::PendingCreated, Some(session_id), Severity::Info);
        e.receipt_id = Some(receipt_id.to_owned());
        e.decision = Some(kind);
        e.attr("item_id", item_id)
    }

    pub fn pending_resolved(session_id: &str, receipt_id: &str, outcome: DecisionKind, item_id: &str, method: &str) -> Self {
        let severity = if outcome == DecisionKind::Deny { Severity::Warn } else { Severity::Info };
        let mut e = EventDraft::new(EventKind::PendingResolved, Some(session_id), severity);
        e.receipt_id = Some(receipt_id.to_owned());
        e.decision = Some(outcome);
        e.attr("item_id", item_id).attr("resolution_method", method)
    }

    pub fn drift_escalation(session_id: &str, drift: f64, threshold: f64) -> Self {
        EventDraft::new(EventKind::DriftEscalation, Some(session_id), Severity::Warn)
            .attr("cumulative_drift", &format!("{drift:.6}"))
            .attr("threshold", &threshold.to_string())
    }

    pub fn chain_verification(session_id: &str, corrupt_seq: Option<u64>) -> Self {
        match corrupt_seq {
            None => EventDraft::new(EventKind::ChainVerification, Some(session_id), Severity::Info).attr("status", "ok"),
            Some(seq) => EventDraft::new(EventKind::ChainVerification, Some(session_id), Severity::Critical)
                .attr("status", "corrupt")
                .attr("corrupt_seq", &seq.to_string()),
        }
    }

    pub fn config_loaded(policy_set_digest: &str) -> Self {
        EventDraft::new(EventKind::ConfigLoaded, None, Severity::Info).attr("policy_set_digest", policy_set_digest)
    }

    pub fn approver_rejected(session_id: Option<&str>, item_id: &str) -> Self {
        EventDraft::new(EventKind::ApproverRejected, session_id, Severity::Warn).attr("item_id", item_id)
    }

    pub fn attr(mut self, key: &str, value: &str) -> Self {
        self.attributes.insert(key.to_owned(), value.to_owned());
        self
    }
}

/// Which events a consumer wants. Empty lists mean "any".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventFilter {
    #[serde(default)]
    pub kinds: Vec<EventKind>,
    #[serde(default)]
    pub decisions: Vec<DecisionKind>,
    #[serde(default)]
    pub min_severity: Option<Severity>,
    #[serde(default)]
    pub sessions: Vec<String>,
    /// Matches the `tool` attribute.
    #[serde(default)]
    pub tools: Vec<String>,
    /// Matches the `human_principal` attribute.
    #[serde(default)]
    pub principals: Vec<String>,
}

impl EventFilter {
    pub fn matches(&self, e: &TelemetryEvent) -> bool {
        let attr_in = |list: &[String], key: &str| {
            list.is_empty() || e.attributes.get(key).is_some_and(|v| list.contains(v))
        };
        (self.kinds.is_empty() || self.kinds.contains(&e.kind))
            && (self.decisions.is_empty() || e.decision.is_some_and(|d| self.decisions.contains(&d)))
            && self.min_severity.is_none_or(|s| e.severity >= s)
            && (self.sessions.is_empty() || e.session_id.as_ref().is_some_and(|s| self.sessions.contains(s)))
            && attr_in(&self.tools, "tool")
            && attr_in(&self.principals, "human_principal")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SinkConfig {
    File(PathBuf),
    Http(String),
}

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("cannot write {path}: {message}")]
    Unwritable { path: String, message: String },
}

enum Command {
    Deliver(Box<TelemetryEvent>),
    Flush(mpsc::Sender<()>),
}

/// Events kept in memory; older ones are only in the sink.
pub const RETAINED_EVENTS: usize = 100_000;

pub struct Telemetry {
    ids: Arc<IdGen>,
    clock: Arc<dyn Clock>,
    /// The most recent [`RETAINED_EVENTS`] events, for queries and batch export.
    events: Mutex<VecDeque<TelemetryEvent>>,
    filter: EventFilter,
    tx: Option<Mutex<mpsc::Sender<Command>>>,
}

impl Telemetry {
    /// Keep events in memory only.
    pub fn disabled(ids: Arc<IdGen>, clock: Arc<dyn Clock>) -> Self {
        Telemetry { ids, clock, events: Mutex::new(VecDeque::new()), filter: EventFilter::default(), tx: None }
    }

    /// Deliver matching events to `sink`; failures spill under `spill_dir`.
    pub fn start(
        sink: SinkConfig,
        filter: EventFilter,
        spill_dir: &Path,
        ids: Arc<IdGen>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let (tx, rx) = mpsc::channel::<Command>();
        let spill = spill_dir.join(SPILL_FILE);
        std::thread::Builder::new()
            .name("aarm-telemetry".into())
            .spawn(move || deliver_loop(rx, sink, spill))
            .expect("spawn telemetry thread");
        Telemetry { ids, clock, events: Mutex::new(VecDeque::new()), filter, tx: Some(Mutex::new(tx)) }
    }

    /// Record and queue an event. Never blocks on the sink.
    pub fn emit(&self, draft: EventDraft) -> TelemetryEvent {
        let event = TelemetryEvent {
            event_id: self.ids.next_uuid(),
            kind: draft.kind,
            time: format_utc(self.clock.now()),
            session_id: draft.session_id,
            receipt_id: draft.receipt_id,
            decision: draft.decision,
            severity: draft.severity,
            attributes: draft.attributes,
        };
        let mut events = self.events.lock();
        if events.len() == RETAINED_EVENTS {
            events.pop_front();
        }
        events.push_back(event.clone());
        drop(events);
        if let Some(tx) = &self.tx {
            if self.filter.matches(&event) && tx.lock().send(Command::Deliver(Box::new(event.clone()))).is_err() {
                tracing::warn!("telemetry delivery thread is gone; event kept in memory only");
            }
        }
        event
    }

    /// Wait until every queued event has been handed to the sink or spilled.
    pub fn flush(&self, timeout: Duration) -> bool {
        let Some(tx) = &self.tx else { return true };
        let (done_tx, done_rx) = mpsc::channel();
        if tx.lock().send(Command::Flush(done_tx)).is_err() {
            return false;
        }
        done_rx.recv_timeout(timeout).is_ok()
    }

    pub fn events(&self, filter: &EventFilter) -> Vec<TelemetryEvent> {
        self.events.lock().iter().filter(|e| filter.matches(e)).cloned().collect()
    }

    /// Write matching events as newline-delimited JSON; returns the count.
    pub fn export_batch(&self, filter: &EventFilter, destination: &Path) -> Result<usize, ExportError> {
        let events = self.events(filter);
        let mut text = String::new();
        for e in &events {
            text.push_str(&serde_json::to_string(e).expect("events serialize"));
            text.push('\n');
        }
        std::fs::write(destination, text).map_err(|e| ExportError::Unwritable {
            path: destination.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(events.len())
    }
}

fn deliver_loop(rx: mpsc::Receiver<Command>, sink: SinkConfig, spill: PathBuf) {
    let client = match &sink {
        SinkConfig::Http(_) => reqwest::blocking::Client::builder().timeout(Duration::from_secs(2)).build().ok(),
        SinkConfig::File(_) => None,
    };
    for cmd in rx {
        match cmd {
            Command::Flush(done) => {
                let _ = done.send(());
            }
            Command::Deliver(event) => {
                let line = serde_json::to_string(&*event).expect("events serialize");
                let delivered = match &sink {
                    SinkConfig::File(path) => append_line(path, &line).is_ok(),
                    SinkConfig::Http(url) => client.as_ref().is_some_and(|c| post(c, url, &line)),
                };
                if delivered {
                    if let (SinkConfig::Http(url), Some(c)) = (&sink, &client) {
                        retry_spill(c, url, &spill);
                    }
                } else {
                    tracing::warn!(sink = ?sink, "telemetry sink unavailable; spilling event");
                    if let Err(e) = append_line(&spill, &line) {
                        tracing::warn!(error = %e, "telemetry spill failed");
                    }
                }
            }
        }
    }
}

fn append_line(path: &Path, line: &str) -> std::io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(format!("{line}\n").as_bytes())
}

fn post(client: &reqwest::blocking::Client, url: &str, body: &str) -> bool {
    client
        .post(url)
        .header("content-type", "application/x-ndjson")
        .body(format!("{body}\n"))
        .send()
        .is_ok_and(|r| r.status().is_success())
}

fn retry_spill(client: &reqwest::blocking::Client, url: &str, spill: &Path) {
    let Ok(text) = std::fs::read_to_string(spill) else { return };
    if text.is_empty() {
        return;
    }
    if client
        .post(url)
        .header("content-type", "application/x-ndjson")
        .body(text)
        .send()
        .is_ok_and(|r| r.status().is_success())
    {
        let _ = std::fs::write(spill, "");
    }
}
