//! The two-stage evaluation pipeline.

use super::{Policy, PolicySet, Tri};
use crate::ledger::ContextSnapshot;
use crate::model::{Action, Decision, DecisionKind, DeferReason};

/// Stage 1 only: DENY if any forbidden policy matches. Context is never
/// consulted.
pub fn evaluate_forbidden(action: &Action, ps: &PolicySet) -> Option<Decision> {
    let mut matched: Vec<&Policy> = ps
        .forbidden_candidates(&action.tool)
        .map(|i| &ps.policies[i])
        .filter(|p| p.expr.eval(action, None) == Tri::True)
        .collect();
    if matched.is_empty() {
        return None;
    }
    sort_by_priority(&mut matched);
    let ids = matched.iter().map(|p| p.id.clone()).collect();
    Some(Decision::forbid(ids, matched[0].reason.clone()))
}

fn sort_by_priority(ps: &mut [&Policy]) {
    ps.sort_by(|a, b| b.priority.cmp(&a.priority).then_with(|| a.id.cmp(&b.id)));
}

/// Map an (action, context) pair to a decision. Never fails: every path
/// ends in a decision, and an unmatched action gets the configured default.
pub fn evaluate(action: &Action, ctx: &ContextSnapshot, ps: &PolicySet) -> Decision {
    if let Some(d) = evaluate_forbidden(action, ps) {
        return d;
    }
    let confidence = if ctx.cumulative_drift.is_some() { ctx.confidence } else { 0.0 };
    let mut matched = Vec::new();
    let mut indeterminate = Vec::new();
    for &i in &ps.contextual {
        let p = &ps.policies[i];
        match p.expr.eval(action, Some(ctx)) {
            Tri::True => matched.push(p),
            Tri::Indeterminate => indeterminate.push(p),
            Tri::False => {}
        }
    }
    sort_by_priority(&mut matched);
    let ids: Vec<String> = matched.iter().map(|p| p.id.clone()).collect();

    let Some(top) = matched.first().map(|p| p.priority) else {
        if let Some(p) = indeterminate.iter().max_by_key(|p| p.priority) {
            return Decision::defer(
                ids,
                DeferReason::MissingContextField,
                format!("policy {} needs context that is not yet available", p.id),
                confidence,
            );
        }
        let reason = format!("no policy matched; default {}", ps.defaults.unmatched_decision);
        return match ps.defaults.unmatched_decision {
            DecisionKind::Allow => Decision::allow(ids, reason, confidence),
            DecisionKind::StepUp => Decision::step_up(ids, reason, confidence),
            _ => Decision::deny(ids, reason, confidence),
        };
    };

    let winners: Vec<&Policy> = matched.iter().copied().take_while(|p| p.priority == top).collect();
    let winner = winners[0];
    if winners.iter().any(|p| !same_effect(p, winner)) {
        let names: Vec<&str> = winners.iter().map(|p| p.id.as_str()).collect();
        return Decision::defer(
            ids,
            DeferReason::PriorityConflict,
            format!("conflicting decisions at priority {top}: {}", names.join(", ")),
            confidence,
        );
    }
    if let Some(p) = indeterminate.iter().filter(|p| p.priority >= top).max_by_key(|p| p.priority) {
        return Decision::defer(
            ids,
            DeferReason::MissingContextField,
            format!("policy {} at priority {} needs context that is not yet available", p.id, p.priority),
            confidence,
        );
    }
    let overrides_deny = winner.decision == DecisionKind::Allow
        && winner.requires_context
        && matched.iter().any(|p| p.priority < top && p.decision == DecisionKind::Deny);
    if overrides_deny && confidence < ps.defaults.confidence_threshold {
        return Decision::defer(
            ids,
            DeferReason::LowConfidence,
            format!(
                "{} overrides a DENY but confidence {confidence:.3} is below {}",
                winner.id, ps.defaults.confidence_threshold
            ),
            confidence,
        );
    }
    let reason = winner.reason.clone();
    match winner.effective_decision() {
        DecisionKind::Allow => Decision::allow(ids, reason, confidence),
        DecisionKind::Deny => Decision::deny(ids, reason, confidence),
        DecisionKind::StepUp => Decision::step_up(ids, reason, confidence),
        DecisionKind::Modify => {
            let modified = winner.apply_transform(&action.parameters);
            Decision::modify(ids, reason, modified, confidence)
        }
        DecisionKind::Defer => unreachable!("policies cannot decide DEFER"),
    }
}

fn same_effect(a: &Policy, b: &Policy) -> bool {
    a.effective_decision() == b.effective_decision()
        && (a.decision != DecisionKind::Modify || a.transform == b.transform)
}
