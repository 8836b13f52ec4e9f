//! Parked actions and the rules that link a new action to them.

use crate::ledger::ContextSnapshot;
use crate::model::{Action, DecisionKind, DeferReason, Params};
use crate::receipt::{OutcomeStatus, ResolutionMethod};
use regex::Regex;
use serde::Serialize;
use serde_json::Value;
use std::sync::LazyLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PendingStatus {
    Pending,
    ResolvedAllow,
    ResolvedDeny,
    TimedOut,
}

impl PendingStatus {
    pub fn is_terminal(self) -> bool {
        self != PendingStatus::Pending
    }
}

/// What happened when a parked item reached its terminal state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemResult {
    pub status: OutcomeStatus,
    pub resolution_method: ResolutionMethod,
    pub receipt_id: String,
    pub reason: String,
    pub output: Option<Value>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PendingItem {
    pub item_id: String,
    pub session_id: String,
    pub action: Action,
    pub kind: DecisionKind,
    pub created_at: String,
    pub deadline: String,
    pub defer_reason: Option<DeferReason>,
    pub context_snapshot_digest: String,
    pub status: PendingStatus,
    pub resolver: Option<String>,
    pub matched_policies: Vec<String>,
    pub reason: String,
    pub confidence: f64,
    pub semantic_distance: Option<f64>,
    pub cumulative_drift: Option<f64>,
    pub drift_threshold: f64,
    /// Context the decision was made against.
    pub context: ContextSnapshot,
    /// Parked items this one waits on.
    pub depends_on: Vec<String>,
    /// Receipt that parked the item in its current kind.
    pub receipt_id: String,
    pub result: Option<ItemResult>,
    #[serde(skip)]
    pub(crate) deadline_at: chrono::DateTime<chrono::Utc>,
}

/// Token an agent embeds in a parameter to consume a parked action's output.
pub fn placeholder(item_id: &str) -> String {
    format!("${{pending:{item_id}}}")
}

/// Parameter keys naming the resource an action targets, in preference order.
pub const RESOURCE_KEYS: &[&str] =
    &["resource", "table", "path", "file", "url", "repository", "repo", "bucket", "key", "id", "to"];

static SQL_TARGET: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:from|into|update|table|join)\s+([A-Za-z_][A-Za-z0-9_.]*)").expect("valid regex")
});

/// The resource an action targets: the first present [`RESOURCE_KEYS`]
/// value, else the first table named in a `sql` or `query` string.
pub fn primary_resource(action: &Action) -> Option<String> {
    for key in RESOURCE_KEYS {
        match action.parameters.get(*key) {
            Some(Value::String(s)) if !s.is_empty() => return Some(s.to_lowercase()),
            Some(Value::Number(n)) => return Some(n.to_string()),
            _ => {}
        }
    }
    ["sql", "query"].iter().find_map(|k| {
        let text = action.parameters.get(*k)?.as_str()?;
        SQL_TARGET.captures(text).map(|c| c[1].to_lowercase())
    })
}

fn strings_in<'a>(v: &'a Value, out: &mut Vec<&'a str>) {
    match v {
        Value::String(s) => out.push(s),
        Value::Array(items) => items.iter().for_each(|x| strings_in(x, out)),
        Value::Object(map) => map.values().for_each(|x| strings_in(x, out)),
        _ => {}
    }
}

fn is_id_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '-' || c == '_'
}

/// `id` occurs in `text` as a whole token, not inside a longer word.
fn mentions(text: &str, id: &str) -> bool {
    text.match_indices(id).any(|(i, _)| {
        !text[..i].chars().next_back().is_some_and(is_id_char) && !text[i + id.len()..].chars().next().is_some_and(is_id_char)
    })
}

/// Ids of the parked items `action` depends on, in the order given. An
/// action depends on an item when a parameter string mentions the item id
/// (bare or as a placeholder), or when both target the same tool and
/// primary resource.
pub fn classify_dependency<'a>(action: &Action, parked: impl IntoIterator<Item = &'a PendingItem>) -> Vec<String> {
    let mut strings = Vec::new();
    for v in action.parameters.values() {
        strings_in(v, &mut strings);
    }
    let resource = primary_resource(action);
    parked
        .into_iter()
        .filter(|item| item.status == PendingStatus::Pending)
        .filter(|item| {
            let named = strings.iter().any(|s| mentions(s, &item.item_id));
            let same_target = item.action.tool == action.tool
                && resource.is_some()
                && primary_resource(&item.action) == resource;
            named || same_target
        })
        .map(|item| item.item_id.clone())
        .collect()
}

/// Replace placeholders of executed items with their outputs. A string
/// that is exactly one placeholder becomes the output value; embedded
/// placeholders are replaced by the output's text.
pub fn substitute_outputs(params: &Params, outputs: &[(String, Value)]) -> Params {
    fn walk(v: &Value, outputs: &[(String, Value)]) -> Value {
        match v {
            Value::String(s) => {
                for (id, out) in outputs {
                    if *s == placeholder(id) {
                        return out.clone();
                    }
                }
                let mut text = s.clone();
                for (id, out) in outputs {
                    let rendered = match out {
                        Value::String(o) => o.clone(),
                        other => other.to_string(),
                    };
                    text = text.replace(&placeholder(id), &rendered);
                }
                Value::String(text)
            }
            Value::Array(items) => Value::Array(items.iter().map(|x| walk(x, outputs)).collect()),
            Value::Object(map) => Value::Object(map.iter().map(|(k, x)| (k.clone(), walk(x, outputs))).collect()),
            other => other.clone(),
        }
    }
    params.iter().map(|(k, v)| (k.clone(), walk(v, outputs))).collect()
}
