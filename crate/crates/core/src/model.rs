//! Shared vocabulary: identities, actions and decisions.

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::fmt;

/// Tool parameters. Insertion order is kept in memory; canonicalization
/// sorts keys, so order never reaches a hash.
pub type Params = Map<String, Value>;

/// The four identity layers plus the privilege scope held at action time.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    #[serde(default)]
    pub human_principal: String,
    #[serde(default)]
    pub service_identity: String,
    #[serde(default)]
    pub agent_identity: String,
    #[serde(default)]
    pub session_id: String,
    #[serde(default)]
    pub privilege_scope: Vec<String>,
}

impl Identity {
    /// Names of the identity layers that are empty.
    pub fn missing_layers(&self) -> Vec<&'static str> {
        let mut missing = Vec::new();
        if self.human_principal.trim().is_empty() {
            missing.push("identity.human_principal");
        }
        if self.service_identity.trim().is_empty() {
            missing.push("identity.service_identity");
        }
        if self.agent_identity.trim().is_empty() {
            missing.push("identity.agent_identity");
        }
        if self.session_id.trim().is_empty() {
            missing.push("identity.session_id");
        }
        missing
    }
}

/// Points at the latest ledger entry visible when the action was submitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRef {
    pub session_id: String,
    pub seq: u64,
}

/// A discrete tool operation requested by an agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub tool: String,
    pub operation: String,
    pub parameters: Params,
    pub identity: Identity,
    pub context_ref: ContextRef,
    /// Informational wall-clock time, RFC 3339 UTC.
    pub timestamp: String,
    /// Server-assigned per-session ordinal; authoritative for ordering.
    pub seq: u64,
}

impl Action {
    pub fn session_id(&self) -> &str {
        &self.context_ref.session_id
    }

    /// `tool.operation`
    pub fn qualified_name(&self) -> String {
        format!("{}.{}", self.tool, self.operation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DecisionKind {
    Allow,
    Deny,
    Modify,
    StepUp,
    Defer,
}

impl DecisionKind {
    pub const ALL: [DecisionKind; 5] = [
        DecisionKind::Allow,
        DecisionKind::Deny,
        DecisionKind::Modify,
        DecisionKind::StepUp,
        DecisionKind::Defer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DecisionKind::Allow => "ALLOW",
            DecisionKind::Deny => "DENY",
            DecisionKind::Modify => "MODIFY",
            DecisionKind::StepUp => "STEP_UP",
            DecisionKind::Defer => "DEFER",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        DecisionKind::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Whether the action reaches the tool without further resolution.
    pub fn permits_execution(self) -> bool {
        matches!(self, DecisionKind::Allow | DecisionKind::Modify)
    }
}

impl fmt::Display for DecisionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeferReason {
    MissingContextField,
    PriorityConflict,
    LowConfidence,
    /// The action consumes or targets the same resource as a pending deferral.
    DependsOnDeferred,
}

impl DeferReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DeferReason::MissingContextField => "MISSING_CONTEXT_FIELD",
            DeferReason::PriorityConflict => "PRIORITY_CONFLICT",
            DeferReason::LowConfidence => "LOW_CONFIDENCE",
            DeferReason::DependsOnDeferred => "DEPENDS_ON_DEFERRED",
        }
    }
}

/// Outcome of policy evaluation. Only constructible through the
/// kind-specific constructors, which uphold the shape invariants
/// (modified parameters iff MODIFY, defer reason iff DEFER, non-empty
/// reason for DENY/DEFER/STEP_UP).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decision {
    kind: DecisionKind,
    matched_policies: Vec<String>,
    reason: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    modified_parameters: Option<Params>,
    #[serde(skip_serializing_if = "Option::is_none")]
    defer_reason: Option<DeferReason>,
    confidence: f64,
    /// Decided in the static forbidden stage.
    forbidden: bool,
}

impl Decision {
    fn build(
        kind: DecisionKind,
        matched_policies: Vec<String>,
        reason: impl Into<String>,
        modified_parameters: Option<Params>,
        defer_reason: Option<DeferReason>,
        confidence: f64,
        forbidden: bool,
    ) -> Self {
        let reason = reason.into();
        assert!(
            !(matches!(kind, DecisionKind::Deny | DecisionKind::Defer | DecisionKind::StepUp)
                && reason.trim().is_empty()),
            "{kind} decision requires a reason"
        );
        assert_eq!(kind == DecisionKind::Modify, modified_parameters.is_some());
        assert_eq!(kind == DecisionKind::Defer, defer_reason.is_some());
        let confidence = if confidence.is_finite() { confidence.clamp(0.0, 1.0) } else { 0.0 };
        Decision {
            kind,
            matched_policies,
            reason,
            modified_parameters,
            defer_reason,
            confidence,
            forbidden,
        }
    }

    pub fn allow(matched: Vec<String>, reason: impl Into<String>, confidence: f64) -> Self {
        Self::build(DecisionKind::Allow, matched, reason, None, None, confidence, false)
    }

    pub fn deny(matched: Vec<String>, reason: impl Into<String>, confidence: f64) -> Self {
        Self::build(DecisionKind::Deny, matched, reason, None, None, confidence, false)
    }

    /// DENY from the forbidden stage; context was never consulted.
    pub fn forbid(matched: Vec<String>, reason: impl Into<String>) -> Self {
        Self::build(DecisionKind::Deny, matched, reason, None, None, 1.0, true)
    }

    pub fn modify(
        matched: Vec<String>,
        reason: impl Into<String>,
        modified: Params,
        confidence: f64,
    ) -> Self {
        Self::build(DecisionKind::Modify, matched, reason, Some(modified), None, confidence, false)
    }

    pub fn step_up(matched: Vec<String>, reason: impl Into<String>, confidence: f64) -> Self {
        Self::build(DecisionKind::StepUp, matched, reason, None, None, confidence, false)
    }

    pub fn defer(
        matched: Vec<String>,
        why: DeferReason,
        reason: impl Into<String>,
        confidence: f64,
    ) -> Self {
        Self::build(DecisionKind::Defer, matched, reason, None, Some(why), confidence, false)
    }

    pub fn kind(&self) -> DecisionKind {
        self.kind
    }
    pub fn matched_policies(&self) -> &[String] {
        &self.matched_policies
    }
    pub fn reason(&self) -> &str {
        &self.reason
    }
    pub fn modified_parameters(&self) -> Option<&Params> {
        self.modified_parameters.as_ref()
    }
    pub fn defer_reason(&self) -> Option<DeferReason> {
        self.defer_reason
    }
    pub fn confidence(&self) -> f64 {
        self.confidence
    }
    pub fn is_forbidden(&self) -> bool {
        self.forbidden
    }
}

/// One broken invariant found by [`validate_action`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Violation { field: field.into(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Check the Action and Identity invariants. `prior_seq` is the seq of the
/// session's previous action, if any.
pub fn validate_action(action: &Action, prior_seq: Option<u64>) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    if action.tool.trim().is_empty() {
        violations.push(Violation::new("tool", "must be non-empty"));
    }
    if action.operation.trim().is_empty() {
        violations.push(Violation::new("operation", "must be non-empty"));
    }
    for layer in action.identity.missing_layers() {
        violations.push(Violation::new(layer, "identity layer missing"));
    }
    if !action.identity.session_id.is_empty()
        && action.identity.session_id != action.context_ref.session_id
    {
        violations.push(Violation::new("identity.session_id", "does not match the action's session"));
    }
    if let Some(prior) = prior_seq {
        if action.seq <= prior {
            violations.push(Violation::new(
                "seq",
                format!("{} does not follow prior seq {prior}", action.seq),
            ));
        }
    }
    if parse_utc(&action.timestamp).is_none() {
        violations.push(Violation::new("timestamp", "not an RFC 3339 UTC timestamp"));
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Parse an RFC 3339 timestamp, accepting only a zero UTC offset.
pub fn parse_utc(s: &str) -> Option<DateTime<Utc>> {
    let parsed = DateTime::parse_from_rfc3339(s).ok()?;
    (parsed.offset().local_minus_utc() == 0).then(|| parsed.with_timezone(&Utc))
}

pub fn format_utc(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    pub(crate) fn sample_action() -> Action {
        let parameters = json!({"to": "external@partner.com", "subject": "Customer Data", "body": "..."});
        Action {
            tool: "email".into(),
            operation: "send".into(),
            parameters: parameters.as_object().unwrap().clone(),
            identity: Identity {
                human_principal: "alice@company.com".into(),
                service_identity: "agent-svc@iam".into(),
                agent_identity: "agent-7".into(),
                session_id: "sess_abc123".into(),
                privilege_scope: vec!["email:send".into()],
            },
            context_ref: ContextRef { session_id: "sess_abc123".into(), seq: 1 },
            timestamp: "2025-01-15T10:30:00Z".into(),
            seq: 2,
        }
    }

    #[test]
    fn sample_action_is_valid() {
        assert_eq!(validate_action(&sample_action(), Some(1)), Ok(()));
    }

    #[test]
    fn empty_human_principal_is_flagged() {
        let mut a = sample_action();
        a.identity.human_principal.clear();
        let v = validate_action(&a, None).unwrap_err();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "identity.human_principal");
    }

    #[test]
    fn repeated_seq_is_flagged() {
        let a = sample_action();
        let v = validate_action(&a, Some(a.seq)).unwrap_err();
        assert_eq!(v[0].field, "seq");
    }

    #[test]
    fn non_utc_timestamp_is_flagged() {
        let mut a = sample_action();
        a.timestamp = "2025-01-15T10:30:00+02:00".into();
        assert_eq!(validate_action(&a, None).unwrap_err()[0].field, "timestamp");
        a.timestamp = "yesterday".into();
        assert_eq!(validate_action(&a, None).unwrap_err()[0].field, "timestamp");
    }

    #[test]
    fn decision_shapes() {
        let d = Decision::defer(vec![], DeferReason::PriorityConflict, "conflict", 0.3);
        assert_eq!(d.defer_reason(), Some(DeferReason::PriorityConflict));
        assert!(d.modified_parameters().is_none());
        let m = Decision::modify(vec!["p".into()], "", Params::new(), 2.0);
        assert_eq!(m.confidence(), 1.0);
        assert!(m.modified_parameters().is_some());
    }

    #[test]
    #[should_panic(expected = "requires a reason")]
    fn deny_without_reason_panics() {
        Decision::deny(vec![], " ", 1.0);
    }

    #[test]
    fn decision_kind_round_trips() {
        for k in DecisionKind::ALL {
            assert_eq!(DecisionKind::parse(k.as_str()), Some(k));
            assert_eq!(serde_json::to_value(k).unwrap(), json!(k.as_str()));
        }
        assert_eq!(DecisionKind::parse("MAYBE"), None);
    }

    #[derive(Debug, Clone, Copy)]
    enum Corruption {
        Tool,
        Operation,
        Human,
        Service,
        Agent,
        Session,
        Seq,
        Timestamp,
    }

    proptest! {
        #[test]
        fn rejects_exactly_the_corrupted(
            corruptions in prop::collection::btree_set(0usize..8, 0..8),
        ) {
            let kinds = [
                Corruption::Tool, Corruption::Operation, Corruption::Human, Corruption::Service,
                Corruption::Agent, Corruption::Session, Corruption::Seq, Corruption::Timestamp,
            ];
            let mut a = sample_action();
            let mut prior = Some(1);
            for idx in &corruptions {
                match kinds[*idx] {
                    Corruption::Tool => a.tool.clear(),
                    Corruption::Operation => a.operation = "  ".into(),
                    Corruption::Human => a.identity.human_principal.clear(),
                    Corruption::Service => a.identity.service_identity.clear(),
                    Corruption::Agent => a.identity.agent_identity.clear(),
                    Corruption::Session => a.identity.session_id = "other".into(),
                    Corruption::Seq => prior = Some(a.seq + 3),
                    Corruption::Timestamp => a.timestamp = "15/01/2025".into(),
                }
            }
            let result = validate_action(&a, prior);
            prop_assert_eq!(result.is_ok(), corruptions.is_empty());
            if let Err(v) = result {
                prop_assert_eq!(v.len(), corruptions.len());
            }
        }
    }
}
