//! Decision enforcement. Permitted actions are forwarded, denied ones
//! blocked, STEP_UP and DEFER actions parked until approval, re-evaluation
//! or timeout. Every transition is receipted.
//!
//! Work on one session is serialized by that session's async mutex, held
//! across the upstream call so tool calls run strictly in arrival order.
//! Sessions never contend with each other.

mod pending;

pub use pending::{
    classify_dependency, placeholder, primary_resource, substitute_outputs, ItemResult, PendingItem,
    PendingStatus, RESOURCE_KEYS,
};

use crate::clock::Clock;
use crate::ids::IdGen;
use crate::intent::{DriftTracker, Embedder};
use crate::ledger::{derive_signals, ChainStatus, ContextLedger, ContextSnapshot, LedgerError, SessionInit, SignalInputs};
use crate::model::{format_utc, validate_action, Action, ContextRef, Decision, DecisionKind, DeferReason, Identity, Params};
use crate::policy::{evaluate, evaluate_forbidden, PolicySet};
use crate::receipt::{
    Approval, Deferral, Outcome, OutcomeStatus, Receipt, ReceiptAction, ReceiptContext, ReceiptDecision,
    ReceiptMaterials, ReceiptVault, ResolutionMethod, Verdict,
};
use crate::telemetry::{EventDraft, Telemetry};
use async_trait::async_trait;
use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use serde_json::Value;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;
use tokio::sync::{watch, Mutex as AsyncMutex};

pub const CASCADE_REASON: &str = "cascade bound exceeded";
pub const UNKNOWN_TOOL_REASON: &str = "unknown tool";

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub step_up_timeout: Duration,
    pub defer_timeout: Duration,
    /// Most PENDING defers one session may hold.
    pub cascade_limit: usize,
    /// Bearer token to approver identity.
    pub approvers: BTreeMap<String, String>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            step_up_timeout: Duration::from_secs(300),
            defer_timeout: Duration::from_secs(120),
            cascade_limit: 8,
            approvers: BTreeMap::new(),
        }
    }
}

/// Reaches the backend tool servers.
#[async_trait]
pub trait ToolForwarder: Send + Sync {
    fn is_registered(&self, tool: &str) -> bool;
    async fn forward(&self, action: &Action, parameters: &Params) -> Result<Value, String>;
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("session {0:?} already exists")]
    SessionExists(String),
    #[error("identity required: missing {}", .0.join(", "))]
    IdentityRequired(Vec<String>),
    #[error("{0}")]
    InvalidRequest(String),
    #[error("no pending item {0:?}")]
    NotFound(String),
    #[error("item {item_id} is already {status:?}")]
    Conflict { item_id: String, status: PendingStatus },
    #[error("item {item_id} waits on parked item(s) {}", .on.join(", "))]
    DependencyPending { item_id: String, on: Vec<String> },
    #[error("not an authorized approver")]
    NotAuthorized,
    #[error("item belongs to another session")]
    ForeignItem,
    /// Evaluation, recording or signing is unavailable; nothing executed.
    #[error("fail-closed: {0}")]
    FailClosed(String),
}

#[derive(Debug, Clone)]
pub struct InitRequest {
    pub session_id: String,
    pub original_request: Option<String>,
    pub identity: Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitOutcome {
    pub session_id: String,
    pub policy_set_digest: String,
    pub genesis_digest: String,
}

#[derive(Debug, Clone)]
pub struct CallRequest {
    pub session_id: String,
    pub tool: String,
    pub operation: String,
    pub parameters: Params,
    /// Replaces the session identity for this call.
    pub identity: Option<Identity>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CallOutcome {
    Executed { receipt_id: String, seq: u64, decision: DecisionKind, output: Value },
    ExecutedWithError { receipt_id: String, seq: u64, decision: DecisionKind, error: String },
    Blocked { receipt_id: String, seq: u64, reason: String, matched_policies: Vec<String> },
    Parked { receipt_id: String, seq: u64, item_id: String, kind: DecisionKind, deadline: String, reason: String },
}

impl CallOutcome {
    pub fn receipt_id(&self) -> &str {
        match self {
            CallOutcome::Executed { receipt_id, .. }
            | CallOutcome::ExecutedWithError { receipt_id, .. }
            | CallOutcome::Blocked { receipt_id, .. }
            | CallOutcome::Parked { receipt_id, .. } => receipt_id,
        }
    }
}

/// Everything the engine is assembled from.
pub struct EngineParts {
    pub policies: Arc<PolicySet>,
    pub ledger: Arc<ContextLedger>,
    pub vault: Arc<ReceiptVault>,
    pub telemetry: Arc<Telemetry>,
    pub embedder: Arc<dyn Embedder>,
    pub forwarder: Arc<dyn ToolForwarder>,
    pub clock: Arc<dyn Clock>,
    pub ids: Arc<IdGen>,
    pub config: EngineConfig,
}

struct SessionState {
    session_id: String,
    identity: Identity,
    next_seq: u64,
    last_seq: Option<u64>,
    drift: DriftTracker,
    /// Every parked item, keyed by action seq.
    items: BTreeMap<u64, PendingItem>,
    item_seq: HashMap<String, u64>,
}

impl SessionState {
    fn pending_defers(&self) -> usize {
        self.items
            .values()
            .filter(|i| i.status == PendingStatus::Pending && i.kind == DecisionKind::Defer)
            .count()
    }

    fn executed_outputs(&self) -> Vec<(String, Value)> {
        self.items
            .values()
            .filter_map(|i| {
                let out = i.result.as_ref()?.output.as_ref()?;
                Some((i.item_id.clone(), out.clone()))
            })
            .collect()
    }

    fn parked_before(&self, seq: u64) -> Vec<String> {
        let item = &self.items[&seq];
        classify_dependency(&item.action, self.items.range(..seq).map(|(_, i)| i))
    }
}

enum Resolution {
    Human { approver: String, verdict: Verdict, note: Option<String> },
    Reevaluated(Decision),
    TimedOut,
    DependencyDenied(u64),
}

/// Receipt fields that vary by transition.
struct Issue<'a> {
    action: &'a Action,
    snapshot: &'a ContextSnapshot,
    kind: DecisionKind,
    matched: Vec<String>,
    reason: String,
    modified: Option<Params>,
    forbidden: bool,
    approval: Option<Approval>,
    deferral: Option<Deferral>,
    outcome: Outcome,
}

impl<'a> Issue<'a> {
    fn decided(action: &'a Action, snapshot: &'a ContextSnapshot, d: &Decision, outcome: Outcome) -> Self {
        Issue {
            action,
            snapshot,
            kind: d.kind(),
            matched: d.matched_policies().to_vec(),
            reason: d.reason().to_owned(),
            modified: d.modified_parameters().cloned(),
            forbidden: d.is_forbidden(),
            approval: None,
            deferral: None,
            outcome,
        }
    }
}

pub struct Engine {
    policies: Arc<PolicySet>,
    ledger: Arc<ContextLedger>,
    vault: Arc<ReceiptVault>,
    telemetry: Arc<Telemetry>,
    embedder: Arc<dyn Embedder>,
    forwarder: Arc<dyn ToolForwarder>,
    clock: Arc<dyn Clock>,
    ids: Arc<IdGen>,
    config: EngineConfig,
    sessions: RwLock<HashMap<String, Arc<AsyncMutex<SessionState>>>>,
    item_sessions: RwLock<HashMap<String, String>>,
    watchers: Mutex<HashMap<String, watch::Sender<PendingStatus>>>,
}

fn chrono_span(d: Duration) -> chrono::Duration {
    chrono::Duration::from_std(d).unwrap_or(chrono::Duration::MAX)
}

fn fail_closed(e: impl std::fmt::Display) -> EngineError {
    EngineError::FailClosed(e.to_string())
}

impl Engine {
    pub fn new(parts: EngineParts) -> Self {
        parts.telemetry.emit(EventDraft::config_loaded(parts.policies.digest()));
        Engine {
            policies: parts.policies,
            ledger: parts.ledger,
            vault: parts.vault,
            telemetry: parts.telemetry,
            embedder: parts.embedder,
            forwarder: parts.forwarder,
            clock: parts.clock,
            ids: parts.ids,
            config: parts.config,
            sessions: RwLock::new(HashMap::new()),
            item_sessions: RwLock::new(HashMap::new()),
            watchers: Mutex::new(HashMap::new()),
        }
    }

    pub fn policies(&self) -> &PolicySet {
        &self.policies
    }
    pub fn ledger(&self) -> &ContextLedger {
        &self.ledger
    }
    pub fn vault(&self) -> &ReceiptVault {
        &self.vault
    }
    pub fn telemetry(&self) -> &Telemetry {
        &self.telemetry
    }
    pub fn clock(&self) -> &dyn Clock {
        &*self.clock
    }
    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    fn session(&self, session_id: &str) -> Result<Arc<AsyncMutex<SessionState>>, EngineError> {
        self.sessions
            .read()
            .get(session_id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownSession(session_id.to_owned()))
    }

    fn all_sessions(&self) -> Vec<Arc<AsyncMutex<SessionState>>> {
        let sessions = self.sessions.read();
        let mut ids: Vec<&String> = sessions.keys().collect();
        ids.sort();
        ids.into_iter().map(|id| sessions[id].clone()).collect()
    }

    pub async fn initialize(&self, req: InitRequest) -> Result<InitOutcome, EngineError> {
        let mut identity = req.identity;
        if identity.session_id.trim().is_empty() {
            identity.session_id = req.session_id.clone();
        }
        let missing = identity.missing_layers();
        if !missing.is_empty() {
            return Err(EngineError::IdentityRequired(missing.into_iter().map(str::to_owned).collect()));
        }
        if identity.session_id != req.session_id {
            return Err(EngineError::InvalidRequest("identity.session_id does not match session_id".into()));
        }
        let mut drift = DriftTracker::new(&req.session_id, self.policies.defaults().drift_threshold);
        if let Some(text) = req.original_request.as_deref().filter(|t| !t.trim().is_empty()) {
            drift.set_baseline(text, &*self.embedder).map_err(|e| EngineError::InvalidRequest(e.to_string()))?;
        }
        let mut sessions = self.sessions.write();
        if sessions.contains_key(&req.session_id) {
            return Err(EngineError::SessionExists(req.session_id));
        }
        let genesis_digest = self
            .ledger
            .init_session(SessionInit {
                schema_version: crate::ledger::SCHEMA_VERSION,
                session_id: req.session_id.clone(),
                original_request: req.original_request.clone(),
                identity: identity.clone(),
                created_at: format_utc(self.clock.now()),
                config_snapshot_digest: self.policies.digest().to_owned(),
            })
            .map_err(|e| match e {
                LedgerError::SessionExists(s) => EngineError::SessionExists(s),
                LedgerError::Validation(m) => EngineError::InvalidRequest(m),
                other => fail_closed(other),
            })?;
        sessions.insert(
            req.session_id.clone(),
            Arc::new(AsyncMutex::new(SessionState {
                session_id: req.session_id.clone(),
                identity,
                next_seq: 1,
                last_seq: None,
                drift,
                items: BTreeMap::new(),
                item_seq: HashMap::new(),
            })),
        );
        Ok(InitOutcome {
            session_id: req.session_id,
            policy_set_digest: self.policies.digest().to_owned(),
            genesis_digest,
        })
    }

    /// Record the original request of a session started without one, then
    /// re-evaluate its defers against the new baseline.
    pub async fn set_intent(&self, session_id: &str, original_request: &str) -> Result<Vec<(String, Decision)>, EngineError> {
        let session = self.session(session_id)?;
        let mut st = session.lock().await;
        let mut drift = st.drift.clone();
        drift.set_baseline(original_request, &*self.embedder).map_err(|e| EngineError::InvalidRequest(e.to_string()))?;
        self.ledger.append_intent(session_id, original_request).map_err(|e| match e {
            LedgerError::IntentAlreadySet(_) | LedgerError::Validation(_) => EngineError::InvalidRequest(e.to_string()),
            other => fail_closed(other),
        })?;
        st.drift = drift;
        Ok(self.reevaluate_locked(&mut st).await)
    }

    fn snapshot(&self, st: &SessionState) -> Result<ContextSnapshot, EngineError> {
        let mut s = self.ledger.current_context(&st.session_id).map_err(fail_closed)?;
        s = s.with_drift(st.drift.cumulative());
        s.deferred_count = st.pending_defers();
        Ok(s)
    }

    /// Measure and record the action's distance from the original request.
    /// Ok(None) without a baseline; Err when the embedder failed.
    fn observe_drift(&self, st: &mut SessionState, action: &Action) -> Result<Option<f64>, ()> {
        if !st.drift.has_baseline() {
            return Ok(None);
        }
        let measured = st.drift.measure(action, &*self.embedder).and_then(|d| Ok((d, st.drift.update(d)?)));
        match measured {
            Ok((d, escalated)) => {
                if escalated {
                    self.telemetry.emit(
                        EventDraft::drift_escalation(&st.session_id, st.drift.running_max(), st.drift.threshold())
                            .attr("tool", &action.tool)
                            .attr("operation", &action.operation)
                            .attr("seq", &action.seq.to_string())
                            .attr("human_principal", &action.identity.human_principal),
                    );
                }
                Ok(Some(d))
            }
            Err(e) => {
                tracing::warn!(session = %st.session_id, error = %e, "drift measurement failed");
                Err(())
            }
        }
    }

    /// Evaluate one agent tool call end to end.
    pub async fn call(&self, req: CallRequest) -> Result<CallOutcome, EngineError> {
        let session = self.session(&req.session_id)?;
        let mut st = session.lock().await;
        let now = self.clock.now();
        self.expire_locked(&mut st, now).await;
        let seq = st.next_seq;
        st.next_seq += 1;
        let action = Action {
            tool: req.tool,
            operation: req.operation,
            parameters: req.parameters,
            identity: req.identity.unwrap_or_else(|| st.identity.clone()),
            context_ref: ContextRef {
                session_id: req.session_id.clone(),
                seq: self.ledger.last_seq(&req.session_id).map_err(fail_closed)?,
            },
            timestamp: format_utc(now),
            seq,
        };
        let prior = st.last_seq.replace(seq);
        let mut snapshot = self.snapshot(&st)?;
        let mut distance = None;
        let mut depends_on = Vec::new();
        let decision = if let Err(violations) = validate_action(&action, prior) {
            let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            Decision::deny(vec![], format!("invalid action: {}", list.join("; ")), 0.0)
        } else if !self.forwarder.is_registered(&action.tool) {
            Decision::deny(vec![], UNKNOWN_TOOL_REASON, 0.0)
        } else {
            match self.observe_drift(&mut st, &action) {
                Ok(d) => {
                    distance = d;
                    snapshot = snapshot.with_drift(st.drift.cumulative());
                }
                Err(()) => snapshot = snapshot.with_drift(None),
            }
            if let Some(d) = evaluate_forbidden(&action, &self.policies) {
                d
            } else {
                depends_on = classify_dependency(&action, st.items.values());
                if depends_on.is_empty() {
                    evaluate(&action, &snapshot, &self.policies)
                } else {
                    Decision::defer(
                        vec![],
                        DeferReason::DependsOnDeferred,
                        format!("depends on parked item(s) {}", depends_on.join(", ")),
                        snapshot.confidence,
                    )
                }
            }
        };
        self.enforce(&mut st, action, decision, snapshot, distance, depends_on).await
    }

    async fn enforce(
        &self,
        st: &mut SessionState,
        action: Action,
        decision: Decision,
        snapshot: ContextSnapshot,
        distance: Option<f64>,
        depends_on: Vec<String>,
    ) -> Result<CallOutcome, EngineError> {
        let seq = action.seq;
        match decision.kind() {
            DecisionKind::Allow | DecisionKind::Modify => {
                let params = decision.modified_parameters().cloned().unwrap_or_else(|| action.parameters.clone());
                let result = self.execute(st, &action, params, distance).await?;
                let outcome = match &result {
                    Ok(_) => Outcome::new(OutcomeStatus::Executed),
                    Err(e) => Outcome::failed(e.clone()),
                };
                let r = self.issue(Issue::decided(&action, &snapshot, &decision, outcome))?;
                if result.is_ok() {
                    self.reevaluate_locked(st).await;
                }
                Ok(match result {
                    Ok(output) => CallOutcome::Executed { receipt_id: r.receipt_id, seq, decision: decision.kind(), output },
                    Err(error) => {
                        CallOutcome::ExecutedWithError { receipt_id: r.receipt_id, seq, decision: decision.kind(), error }
                    }
                })
            }
            DecisionKind::Deny => self.block(&action, &snapshot, &decision),
            DecisionKind::Defer if st.pending_defers() >= self.config.cascade_limit => {
                let denied = Decision::deny(decision.matched_policies().to_vec(), CASCADE_REASON, decision.confidence());
                self.block(&action, &snapshot, &denied)
            }
            DecisionKind::StepUp | DecisionKind::Defer => self.park(st, action, &decision, snapshot, distance, depends_on),
        }
    }

    fn block(&self, action: &Action, snapshot: &ContextSnapshot, d: &Decision) -> Result<CallOutcome, EngineError> {
        let r = self.issue(Issue::decided(action, snapshot, d, Outcome::new(OutcomeStatus::Blocked)))?;
        Ok(CallOutcome::Blocked {
            receipt_id: r.receipt_id,
            seq: action.seq,
            reason: d.reason().to_owned(),
            matched_policies: d.matched_policies().to_vec(),
        })
    }

    fn park(
        &self,
        st: &mut SessionState,
        action: Action,
        decision: &Decision,
        snapshot: ContextSnapshot,
        distance: Option<f64>,
        depends_on: Vec<String>,
    ) -> Result<CallOutcome, EngineError> {
        let now = self.clock.now();
        let kind = decision.kind();
        let deadline_at = now + chrono_span(self.timeout_for(kind));
        let mut issue = Issue::decided(&action, &snapshot, decision, Outcome::new(OutcomeStatus::Parked));
        if kind == DecisionKind::Defer {
            issue.deferral = Some(Deferral {
                defer_reason: decision.defer_reason(),
                resolution_method: None,
                resolution_timestamp: None,
                parent_receipt_id: None,
            });
        }
        let r = self.issue(issue)?;
        let item = PendingItem {
            item_id: self.ids.next_uuid(),
            session_id: st.session_id.clone(),
            kind,
            created_at: format_utc(now),
            deadline: format_utc(deadline_at),
            defer_reason: decision.defer_reason(),
            context_snapshot_digest: snapshot.digest(),
            status: PendingStatus::Pending,
            resolver: None,
            matched_policies: decision.matched_policies().to_vec(),
            reason: decision.reason().to_owned(),
            confidence: decision.confidence(),
            semantic_distance: distance,
            cumulative_drift: snapshot.cumulative_drift,
            drift_threshold: self.policies.defaults().drift_threshold,
            context: snapshot,
            depends_on,
            receipt_id: r.receipt_id.clone(),
            result: None,
            deadline_at,
            action,
        };
        self.announce_parked(&item);
        let outcome = CallOutcome::Parked {
            receipt_id: r.receipt_id,
            seq: item.action.seq,
            item_id: item.item_id.clone(),
            kind,
            deadline: item.deadline.clone(),
            reason: item.reason.clone(),
        };
        self.item_sessions.write().insert(item.item_id.clone(), st.session_id.clone());
        self.watchers.lock().insert(item.item_id.clone(), watch::channel(PendingStatus::Pending).0);
        st.item_seq.insert(item.item_id.clone(), item.action.seq);
        st.items.insert(item.action.seq, item);
        Ok(outcome)
    }

    fn timeout_for(&self, kind: DecisionKind) -> Duration {
        if kind == DecisionKind::StepUp {
            self.config.step_up_timeout
        } else {
            self.config.defer_timeout
        }
    }

    fn announce_parked(&self, item: &PendingItem) {
        self.telemetry.emit(
            EventDraft::pending_created(&item.session_id, &item.receipt_id, item.kind, &item.item_id)
                .attr("tool", &item.action.tool)
                .attr("operation", &item.action.operation)
                .attr("seq", &item.action.seq.to_string())
                .attr("deadline", &item.deadline)
                .attr("reason", &item.reason)
                .attr("human_principal", &item.action.identity.human_principal),
        );
    }

    /// Forward a permitted action and append it with its output to the
    /// ledger. The outer error means nothing was forwarded; the inner one
    /// is an execution failure.
    async fn execute(
        &self,
        st: &SessionState,
        action: &Action,
        params: Params,
        distance: Option<f64>,
    ) -> Result<Result<Value, String>, EngineError> {
        self.vault.ready().map_err(fail_closed)?;
        let params = substitute_outputs(&params, &st.executed_outputs());
        let output = match self.forwarder.forward(action, &params).await {
            Ok(output) => output,
            Err(e) => return Ok(Err(e)),
        };
        let mut executed = action.clone();
        executed.parameters = params;
        let previous = self.ledger.current_context(&st.session_id).map_err(fail_closed)?;
        let signals = derive_signals(SignalInputs {
            previous: &previous,
            action: &executed,
            output: Some(&output),
            semantic_distance: distance,
            cumulative_drift: st.drift.cumulative(),
            drift_threshold: self.policies.defaults().drift_threshold,
            rules: self.policies.classification(),
        });
        if let Err(e) = self.ledger.append_entry(&st.session_id, previous.ledger_seq + 1, executed, Some(output.clone()), signals) {
            tracing::error!(session = %st.session_id, error = %e, "context append failed after execution");
            return Ok(Err(format!("executed but context append failed: {e}")));
        }
        Ok(Ok(output))
    }

    fn issue(&self, i: Issue<'_>) -> Result<Receipt, EngineError> {
        let status = i.outcome.status;
        let receipt = self
            .vault
            .issue(ReceiptMaterials {
                action: ReceiptAction {
                    tool: i.action.tool.clone(),
                    operation: i.action.operation.clone(),
                    parameters: i.action.parameters.clone(),
                    timestamp: i.action.timestamp.clone(),
                    seq: i.action.seq,
                },
                context: ReceiptContext {
                    session_id: i.snapshot.session_id.clone(),
                    context_snapshot_digest: i.snapshot.digest(),
                    data_classifications: i.snapshot.data_classifications.clone(),
                    cumulative_drift: i.snapshot.cumulative_drift,
                    deferred_count: i.snapshot.deferred_count,
                },
                identity: i.action.identity.clone(),
                decision: ReceiptDecision {
                    kind: i.kind,
                    matched_policies: i.matched.clone(),
                    reason: i.reason.clone(),
                    policy_set_digest: self.policies.digest().to_owned(),
                    modified_parameters: i.modified,
                },
                approval: i.approval,
                deferral: i.deferral,
                outcome: Some(i.outcome),
            })
            .map_err(fail_closed)?;
        self.telemetry.emit(
            EventDraft::decision(&receipt.context.session_id, &receipt.receipt_id, i.kind, i.forbidden)
                .attr("tool", &i.action.tool)
                .attr("operation", &i.action.operation)
                .attr("seq", &i.action.seq.to_string())
                .attr("reason", &i.reason)
                .attr("matched_policies", &i.matched.join(","))
                .attr("outcome", &format!("{status:?}"))
                .attr("human_principal", &i.action.identity.human_principal)
                .attr("agent_identity", &i.action.identity.agent_identity),
        );
        Ok(receipt)
    }

    /// Bring one parked item to its terminal state. Returns whether the
    /// item ended denied.
    async fn resolve_one(&self, st: &mut SessionState, seq: u64, res: Resolution) -> Result<bool, EngineError> {
        let item = st.items[&seq].clone();
        let now = self.clock.now();
        let ts = format_utc(now);
        let (kind, matched, reason, modified, method, resolver, approval) = match res {
            Resolution::Human { approver, verdict, note } => {
                let approval = Approval { approver: approver.clone(), verdict, timestamp: ts.clone(), note: note.clone() };
                let mut reason = match verdict {
                    Verdict::Allow => format!("approved by {approver}"),
                    Verdict::Deny => format!("denied by {approver}"),
                };
                if let Some(n) = note.filter(|n| !n.is_empty()) {
                    reason = format!("{reason}: {n}");
                }
                let (kind, method) = match verdict {
                    Verdict::Allow => (DecisionKind::Allow, ResolutionMethod::HumanAllow),
                    Verdict::Deny => (DecisionKind::Deny, ResolutionMethod::HumanDeny),
                };
                (kind, item.matched_policies.clone(), reason, None, method, approver, Some(approval))
            }
            Resolution::Reevaluated(d) => {
                let resolver = format!("auto:{}", d.matched_policies().first().map(String::as_str).unwrap_or("default"));
                let modified = d.modified_parameters().cloned();
                (d.kind(), d.matched_policies().to_vec(), d.reason().to_owned(), modified, ResolutionMethod::ReEvaluation, resolver, None)
            }
            Resolution::TimedOut => {
                let secs = self.timeout_for(item.kind).as_secs();
                let reason = format!("no resolution within {secs}s; denied on timeout");
                (DecisionKind::Deny, item.matched_policies.clone(), reason, None, ResolutionMethod::Timeout, "timeout".into(), None)
            }
            Resolution::DependencyDenied(parent) => {
                let reason = format!("depends on denied action seq {parent}");
                (DecisionKind::Deny, vec![], reason, None, ResolutionMethod::ReEvaluation, "auto:dependency".into(), None)
            }
        };
        let executes = kind.permits_execution();
        let result = if executes {
            let params = modified.clone().unwrap_or_else(|| item.action.parameters.clone());
            Some(self.execute(st, &item.action, params, item.semantic_distance).await?)
        } else {
            None
        };
        let outcome = match &result {
            Some(Ok(_)) => Outcome::new(OutcomeStatus::Executed),
            Some(Err(e)) => Outcome::failed(e.clone()),
            None => Outcome::new(OutcomeStatus::Blocked),
        };
        let out_status = outcome.status;
        let out_error = outcome.error.clone();
        let snapshot = self.snapshot(st)?;
        let r = self.issue(Issue {
            action: &item.action,
            snapshot: &snapshot,
            kind,
            matched,
            reason: reason.clone(),
            modified,
            forbidden: false,
            approval,
            deferral: Some(Deferral {
                defer_reason: item.defer_reason,
                resolution_method: Some(method),
                resolution_timestamp: Some(ts),
                parent_receipt_id: Some(item.receipt_id.clone()),
            }),
            outcome,
        })?;
        let status = match (&result, method) {
            (Some(_), _) => PendingStatus::ResolvedAllow,
            (None, ResolutionMethod::Timeout) => PendingStatus::TimedOut,
            (None, _) => PendingStatus::ResolvedDeny,
        };
        let entry = st.items.get_mut(&seq).expect("item exists");
        entry.status = status;
        entry.resolver = Some(resolver);
        entry.result = Some(ItemResult {
            status: out_status,
            resolution_method: method,
            receipt_id: r.receipt_id.clone(),
            reason,
            output: result.and_then(Result::ok),
            error: out_error,
        });
        self.telemetry.emit(
            EventDraft::pending_resolved(&item.session_id, &r.receipt_id, kind, &item.item_id, method.as_str())
                .attr("tool", &item.action.tool)
                .attr("operation", &item.action.operation)
                .attr("human_principal", &item.action.identity.human_principal),
        );
        if let Some(tx) = self.watchers.lock().get(&item.item_id) {
            tx.send_replace(status);
        }
        Ok(!executes)
    }

    /// Resolve an item; if it ends denied, deny every parked action that
    /// waits on it, transitively and in seq order.
    async fn resolve_cascade(&self, st: &mut SessionState, seq: u64, res: Resolution) -> Result<bool, EngineError> {
        let denied = self.resolve_one(st, seq, res).await?;
        if denied {
            let mut denied_ids = vec![(st.items[&seq].item_id.clone(), seq)];
            loop {
                let next = st.items.iter().find_map(|(s, i)| {
                    let parent = denied_ids.iter().find(|(id, _)| i.depends_on.contains(id))?;
                    (i.status == PendingStatus::Pending).then_some((*s, parent.1))
                });
                let Some((dep_seq, parent_seq)) = next else { break };
                self.resolve_one(st, dep_seq, Resolution::DependencyDenied(parent_seq)).await?;
                denied_ids.push((st.items[&dep_seq].item_id.clone(), dep_seq));
            }
        }
        Ok(denied)
    }

    /// A DEFER item whose re-evaluation now requires approval becomes a
    /// STEP_UP item with a fresh deadline, under the same item id.
    fn convert_to_step_up(&self, st: &mut SessionState, seq: u64, d: &Decision) -> Result<(), EngineError> {
        let now = self.clock.now();
        let snapshot = self.snapshot(st)?;
        let item = st.items[&seq].clone();
        let mut issue = Issue::decided(&item.action, &snapshot, d, Outcome::new(OutcomeStatus::Parked));
        issue.deferral = Some(Deferral {
            defer_reason: item.defer_reason,
            resolution_method: Some(ResolutionMethod::ReEvaluation),
            resolution_timestamp: Some(format_utc(now)),
            parent_receipt_id: Some(item.receipt_id.clone()),
        });
        let r = self.issue(issue)?;
        self.telemetry.emit(EventDraft::pending_resolved(
            &item.session_id,
            &r.receipt_id,
            DecisionKind::StepUp,
            &item.item_id,
            ResolutionMethod::ReEvaluation.as_str(),
        ));
        let deadline_at = now + chrono_span(self.config.step_up_timeout);
        let entry = st.items.get_mut(&seq).expect("item exists");
        entry.kind = DecisionKind::StepUp;
        entry.defer_reason = None;
        entry.deadline_at = deadline_at;
        entry.deadline = format_utc(deadline_at);
        entry.receipt_id = r.receipt_id;
        entry.matched_policies = d.matched_policies().to_vec();
        entry.reason = d.reason().to_owned();
        entry.confidence = d.confidence();
        entry.context_snapshot_digest = snapshot.digest();
        entry.cumulative_drift = snapshot.cumulative_drift;
        entry.context = snapshot;
        let entry = entry.clone();
        self.announce_parked(&entry);
        Ok(())
    }

    /// Re-run evaluation for every PENDING defer in seq order until nothing
    /// changes. Items still waiting on an earlier parked action, or still
    /// indeterminate, stay parked.
    async fn reevaluate_locked(&self, st: &mut SessionState) -> Vec<(String, Decision)> {
        let mut changed = Vec::new();
        loop {
            let mut progressed = false;
            let seqs: Vec<u64> = st
                .items
                .iter()
                .filter(|(_, i)| i.status == PendingStatus::Pending && i.kind == DecisionKind::Defer)
                .map(|(s, _)| *s)
                .collect();
            for seq in seqs {
                if st.items[&seq].status != PendingStatus::Pending {
                    continue;
                }
                let deps = st.parked_before(seq);
                if !deps.is_empty() {
                    st.items.get_mut(&seq).expect("item exists").depends_on = deps;
                    continue;
                }
                let Ok(snapshot) = self.snapshot(st) else { return changed };
                let item = &st.items[&seq];
                let d = evaluate(&item.action, &snapshot, &self.policies);
                let item_id = item.item_id.clone();
                let step = match d.kind() {
                    DecisionKind::Defer => continue,
                    DecisionKind::StepUp => self.convert_to_step_up(st, seq, &d),
                    _ => self.resolve_cascade(st, seq, Resolution::Reevaluated(d.clone())).await.map(|_| ()),
                };
                match step {
                    Ok(()) => {
                        changed.push((item_id, d));
                        progressed = true;
                    }
                    Err(e) => {
                        tracing::warn!(session = %st.session_id, error = %e, "re-evaluation left item parked");
                        return changed;
                    }
                }
            }
            if !progressed {
                return changed;
            }
        }
    }

    async fn expire_locked(&self, st: &mut SessionState, now: chrono::DateTime<chrono::Utc>) -> Vec<String> {
        let due: Vec<u64> = st
            .items
            .iter()
            .filter(|(_, i)| i.status == PendingStatus::Pending && i.deadline_at <= now)
            .map(|(s, _)| *s)
            .collect();
        let mut expired = Vec::new();
        for seq in due {
            if st.items[&seq].status != PendingStatus::Pending {
                continue;
            }
            let id = st.items[&seq].item_id.clone();
            match self.resolve_cascade(st, seq, Resolution::TimedOut).await {
                Ok(_) => expired.push(id),
                Err(e) => tracing::error!(item = %id, error = %e, "timeout could not be recorded; item stays parked"),
            }
        }
        expired
    }

    /// Time out every parked item whose deadline has passed.
    pub async fn expire_timeouts(&self, now: chrono::DateTime<chrono::Utc>) -> Vec<String> {
        let mut out = Vec::new();
        for s in self.all_sessions() {
            let mut st = s.lock().await;
            out.extend(self.expire_locked(&mut st, now).await);
        }
        out
    }

    pub async fn resolve_deferred_auto(&self, session_id: &str) -> Result<Vec<(String, Decision)>, EngineError> {
        let session = self.session(session_id)?;
        let mut st = session.lock().await;
        Ok(self.reevaluate_locked(&mut st).await)
    }

    /// Periodic work: timeouts, then re-evaluation, for every session.
    pub async fn sweep(&self) {
        let now = self.clock.now();
        for s in self.all_sessions() {
            let mut st = s.lock().await;
            self.expire_locked(&mut st, now).await;
            self.reevaluate_locked(&mut st).await;
        }
    }

    pub async fn submit_approval(
        &self,
        item_id: &str,
        approver_token: &str,
        verdict: Verdict,
        note: Option<String>,
    ) -> Result<PendingItem, EngineError> {
        let owner = self.item_sessions.read().get(item_id).cloned();
        let Some(approver) = self.config.approvers.get(approver_token).cloned() else {
            self.telemetry.emit(EventDraft::approver_rejected(owner.as_deref(), item_id));
            return Err(EngineError::NotAuthorized);
        };
        let session_id = owner.ok_or_else(|| EngineError::NotFound(item_id.to_owned()))?;
        let session = self.session(&session_id)?;
        let mut st = session.lock().await;
        self.expire_locked(&mut st, self.clock.now()).await;
        let seq = st.item_seq[item_id];
        let status = st.items[&seq].status;
        if status.is_terminal() {
            return Err(EngineError::Conflict { item_id: item_id.to_owned(), status });
        }
        if verdict == Verdict::Allow {
            let on = st.parked_before(seq);
            if !on.is_empty() {
                return Err(EngineError::DependencyPending { item_id: item_id.to_owned(), on });
            }
        }
        let denied = self.resolve_cascade(&mut st, seq, Resolution::Human { approver, verdict, note }).await?;
        if !denied {
            self.reevaluate_locked(&mut st).await;
        }
        Ok(st.items[&seq].clone())
    }

    /// The item as seen from `session_id`.
    pub async fn pending_status(&self, session_id: &str, item_id: &str) -> Result<PendingItem, EngineError> {
        let session = self.session(session_id)?;
        let owner = self.item_sessions.read().get(item_id).cloned();
        match owner {
            None => return Err(EngineError::NotFound(item_id.to_owned())),
            Some(o) if o != session_id => return Err(EngineError::ForeignItem),
            Some(_) => {}
        }
        let mut st = session.lock().await;
        self.expire_locked(&mut st, self.clock.now()).await;
        Ok(st.items[&st.item_seq[item_id]].clone())
    }

    pub async fn item(&self, item_id: &str) -> Option<PendingItem> {
        let session_id = self.item_sessions.read().get(item_id).cloned()?;
        let session = self.session(&session_id).ok()?;
        let st = session.lock().await;
        st.item_seq.get(item_id).map(|s| st.items[s].clone())
    }

    /// Wait up to `hold` for the item to reach a terminal state.
    pub async fn wait_terminal(&self, item_id: &str, hold: Duration) -> Option<PendingItem> {
        let rx = self.watchers.lock().get(item_id).map(|tx| tx.subscribe());
        if let Some(mut rx) = rx {
            let _ = tokio::time::timeout(hold, rx.wait_for(|s| s.is_terminal())).await;
        }
        self.item(item_id).await
    }

    /// Parked items, optionally of one session, in session then seq order.
    pub async fn pending(&self, session_id: Option<&str>, include_terminal: bool) -> Result<Vec<PendingItem>, EngineError> {
        let sessions = match session_id {
            Some(id) => vec![self.session(id)?],
            None => self.all_sessions(),
        };
        let now = self.clock.now();
        let mut out = Vec::new();
        for s in sessions {
            let mut st = s.lock().await;
            self.expire_locked(&mut st, now).await;
            out.extend(st.items.values().filter(|i| include_terminal || !i.status.is_terminal()).cloned());
        }
        Ok(out)
    }

    /// Verify a session's hash chain and report the result as telemetry.
    pub fn verify_chain(&self, session_id: &str) -> ChainStatus {
        let status = self.ledger.verify_chain(session_id);
        let corrupt = match &status {
            ChainStatus::Ok { .. } => None,
            ChainStatus::Corrupt { seq, .. } => Some(*seq),
        };
        self.telemetry.emit(EventDraft::chain_verification(session_id, corrupt));
        status
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().keys().cloned().collect();
        ids.sort();
        ids
    }
}
