//! Policy documents and their evaluation.
//!
//! A document is JSON:
//!
//! ```json
//! {"version": 1,
//!  "named_lists": {"internal_domains": ["company.com"]},
//!  "lattice": ["PUBLIC", "INTERNAL", "CONFIDENTIAL", "PII"],
//!  "defaults": {"unmatched_decision": "DENY", "confidence_threshold": 0.5, "drift_threshold": 0.6},
//!  "policies": [{"id": "block_external_after_pii",
//!                "match": ["AND", ["==", "action.tool", "email"],
//!                                 ["NOT_IN", "action.params.to", "@internal_domains"],
//!                                 ["CONTAINS", "context.data_classification", "PII"]],
//!                "decision": "DENY", "priority": 100, "reason": "External email after PII access"}]}
//! ```
//!
//! Loading is all-or-nothing and reports every problem with its line and
//! column.

mod eval;
pub mod predicate;
pub mod span;

pub use eval::{evaluate, evaluate_forbidden};
pub use predicate::{Expr, Tri};

use crate::canonical;
use crate::classify::{ClassificationConfig, ClassificationRules, Lattice};
use crate::model::{DecisionKind, Params};
use predicate::NamedLists;
use serde_json::{Map, Value};
use span::SpanIndex;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyIssue {
    pub pointer: String,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for PolicyIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.column, self.message)?;
        if !self.pointer.is_empty() {
            write!(f, " (at {})", self.pointer)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct PolicyParseError {
    pub issues: Vec<PolicyIssue>,
}

impl fmt::Display for PolicyParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "policy document rejected with {} error(s)", self.issues.len())?;
        for issue in &self.issues {
            write!(f, "\n  {issue}")?;
        }
        Ok(())
    }
}

/// One parameter replacement applied by a MODIFY policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    /// Dotted path relative to the action parameters.
    pub path: Vec<String>,
    pub value: Value,
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub id: String,
    pub expr: Expr,
    pub decision: DecisionKind,
    pub priority: u64,
    pub reason: String,
    pub forbidden: bool,
    pub transform: Vec<Transform>,
    /// Escalate a matching ALLOW to human approval.
    pub step_up: bool,
    pub requires_context: bool,
}

impl Policy {
    /// The decision this policy yields once it wins.
    pub fn effective_decision(&self) -> DecisionKind {
        if self.step_up {
            DecisionKind::StepUp
        } else {
            self.decision
        }
    }

    pub fn apply_transform(&self, params: &Params) -> Params {
        apply_transforms(params, &self.transform)
    }
}

pub fn apply_transforms(params: &Params, transforms: &[Transform]) -> Params {
    let mut out = params.clone();
    for t in transforms {
        let (last, parents) = t.path.split_last().expect("transform paths are non-empty");
        let mut cur = &mut out;
        for p in parents {
            let slot = cur.entry(p.clone()).or_insert_with(|| Value::Object(Map::new()));
            if !slot.is_object() {
                *slot = Value::Object(Map::new());
            }
            cur = slot.as_object_mut().expect("just ensured object");
        }
        cur.insert(last.clone(), t.value.clone());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Defaults {
    pub unmatched_decision: DecisionKind,
    pub confidence_threshold: f64,
    pub drift_threshold: f64,
}

impl Default for Defaults {
    fn default() -> Self {
        Defaults { unmatched_decision: DecisionKind::Deny, confidence_threshold: 0.5, drift_threshold: 0.6 }
    }
}

/// Immutable, compiled policy set.
#[derive(Debug)]
pub struct PolicySet {
    policies: Vec<Policy>,
    named_lists: BTreeMap<String, Vec<String>>,
    defaults: Defaults,
    classification: ClassificationRules,
    digest: String,
    forbidden_by_tool: HashMap<String, Vec<usize>>,
    forbidden_any_tool: Vec<usize>,
    contextual: Vec<usize>,
}

impl PolicySet {
    pub fn parse(text: &str) -> Result<PolicySet, PolicyParseError> {
        let doc: Value = serde_json::from_str(text).map_err(|e| PolicyParseError {
            issues: vec![PolicyIssue {
                pointer: String::new(),
                line: e.line(),
                column: e.column(),
                message: format!("invalid JSON: {e}"),
            }],
        })?;
        let spans = SpanIndex::build(text);
        let mut p = Parser { spans: &spans, issues: Vec::new() };
        let set = p.document(&doc);
        match set {
            Some(set) if p.issues.is_empty() => Ok(set),
            _ => Err(PolicyParseError { issues: p.issues }),
        }
    }

    pub fn parse_bytes(bytes: &[u8]) -> Result<PolicySet, PolicyParseError> {
        let text = std::str::from_utf8(bytes).map_err(|e| PolicyParseError {
            issues: vec![PolicyIssue { pointer: String::new(), line: 1, column: 1, message: format!("not UTF-8: {e}") }],
        })?;
        PolicySet::parse(text)
    }

    pub fn policies(&self) -> &[Policy] {
        &self.policies
    }

    pub fn policy(&self, id: &str) -> Option<&Policy> {
        self.policies.iter().find(|p| p.id == id)
    }

    pub fn named_list(&self, name: &str) -> Option<&[String]> {
        self.named_lists.get(name).map(Vec::as_slice)
    }

    pub fn defaults(&self) -> &Defaults {
        &self.defaults
    }

    pub fn lattice(&self) -> &Lattice {
        self.classification.lattice()
    }

    pub fn classification(&self) -> &ClassificationRules {
        &self.classification
    }

    /// SHA-256 of the canonical bytes of the loaded document.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Indices of forbidden policies that can match `tool`.
    fn forbidden_candidates<'a>(&'a self, tool: &str) -> impl Iterator<Item = usize> + 'a {
        let keyed = self.forbidden_by_tool.get(tool).map(Vec::as_slice).unwrap_or(&[]);
        keyed.iter().chain(self.forbidden_any_tool.iter()).copied()
    }
}

struct Parser<'a> {
    spans: &'a SpanIndex,
    issues: Vec<PolicyIssue>,
}

const TOP_KEYS: &[&str] = &["version", "named_lists", "lattice", "defaults", "policies", "classification"];
const POLICY_KEYS: &[&str] = &["id", "match", "decision", "priority", "reason", "forbidden", "transform", "step_up"];
const DEFAULT_KEYS: &[&str] = &["unmatched_decision", "confidence_threshold", "drift_threshold"];

impl Parser<'_> {
    fn issue(&mut self, pointer: &str, message: impl Into<String>) {
        let loc = self.spans.locate(pointer);
        self.issues.push(PolicyIssue {
            pointer: pointer.to_owned(),
            line: loc.line,
            column: loc.column,
            message: message.into(),
        });
    }

    fn check_keys(&mut self, obj: &Map<String, Value>, allowed: &[&str], pointer: &str) {
        for k in obj.keys() {
            if !allowed.contains(&k.as_str()) {
                self.issue(&format!("{pointer}/{k}"), format!("unknown key {k:?}"));
            }
        }
    }

    fn document(&mut self, doc: &Value) -> Option<PolicySet> {
        let Some(obj) = doc.as_object() else {
            self.issue("", "policy document must be a JSON object");
            return None;
        };
        self.check_keys(obj, TOP_KEYS, "");
        match obj.get("version") {
            None => {}
            Some(v) if v.as_u64() == Some(1) => {}
            Some(_) => self.issue("/version", "unsupported version (expected 1)"),
        }
        let named_lists = self.named_lists(obj.get("named_lists"));
        let lattice = self.lattice(obj.get("lattice"));
        let defaults = self.defaults(obj.get("defaults"));
        let classification = self.classification(obj.get("classification"), lattice);
        let compiled_lists: NamedLists = named_lists
            .iter()
            .map(|(k, v)| (k.clone(), Arc::new(Value::from(v.clone()))))
            .collect();
        let policies = self.policies(obj.get("policies"), &compiled_lists);
        let digest = canonical::canonical_digest(doc).ok()?;

        let mut forbidden_by_tool: HashMap<String, Vec<usize>> = HashMap::new();
        let mut forbidden_any_tool = Vec::new();
        let mut contextual = Vec::new();
        for (i, p) in policies.iter().enumerate() {
            if !p.forbidden {
                contextual.push(i);
                continue;
            }
            match p.expr.tool_constraint() {
                Some(tools) => tools.into_iter().for_each(|t| forbidden_by_tool.entry(t).or_default().push(i)),
                None => forbidden_any_tool.push(i),
            }
        }
        Some(PolicySet {
            policies,
            named_lists,
            defaults: defaults?,
            classification: classification?,
            digest,
            forbidden_by_tool,
            forbidden_any_tool,
            contextual,
        })
    }

    fn named_lists(&mut self, v: Option<&Value>) -> BTreeMap<String, Vec<String>> {
        let mut out = BTreeMap::new();
        let Some(v) = v else { return out };
        let Some(obj) = v.as_object() else {
            self.issue("/named_lists", "named_lists must be an object of string lists");
            return out;
        };
        for (name, list) in obj {
            let pointer = format!("/named_lists/{name}");
            match list.as_array().map(|xs| xs.iter().map(|x| x.as_str().map(str::to_owned)).collect::<Option<Vec<_>>>()) {
                Some(Some(items)) => {
                    out.insert(name.clone(), items);
                }
                _ => self.issue(&pointer, "named list must be an array of strings"),
            }
        }
        out
    }

    fn lattice(&mut self, v: Option<&Value>) -> Option<Lattice> {
        let Some(v) = v else { return Some(Lattice::default()) };
        let labels: Option<Vec<String>> =
            v.as_array().and_then(|xs| xs.iter().map(|x| x.as_str().map(str::to_owned)).collect());
        let Some(labels) = labels else {
            self.issue("/lattice", "lattice must be an array of label strings");
            return None;
        };
        match Lattice::new(labels) {
            Ok(l) => Some(l),
            Err(e) => {
                self.issue("/lattice", e.to_string());
                None
            }
        }
    }

    fn defaults(&mut self, v: Option<&Value>) -> Option<Defaults> {
        let mut d = Defaults::default();
        let Some(v) = v else { return Some(d) };
        let Some(obj) = v.as_object() else {
            self.issue("/defaults", "defaults must be an object");
            return None;
        };
        self.check_keys(obj, DEFAULT_KEYS, "/defaults");
        let mut ok = true;
        if let Some(u) = obj.get("unmatched_decision") {
            match u.as_str().and_then(DecisionKind::parse) {
                Some(k @ (DecisionKind::Allow | DecisionKind::Deny | DecisionKind::StepUp)) => d.unmatched_decision = k,
                _ => {
                    self.issue("/defaults/unmatched_decision", "must be ALLOW, DENY or STEP_UP");
                    ok = false;
                }
            }
        }
        for (key, slot) in [
            ("confidence_threshold", &mut d.confidence_threshold),
            ("drift_threshold", &mut d.drift_threshold),
        ] {
            if let Some(x) = obj.get(key) {
                match x.as_f64() {
                    Some(f) if (0.0..=1.0).contains(&f) => *slot = f,
                    _ => {
                        self.issue(&format!("/defaults/{key}"), "must be a number in [0, 1]");
                        ok = false;
                    }
                }
            }
        }
        ok.then_some(d)
    }

    fn classification(&mut self, v: Option<&Value>, lattice: Option<Lattice>) -> Option<ClassificationRules> {
        let config = match v {
            None => ClassificationConfig { default_patterns: true, ..Default::default() },
            Some(v) => match serde_json::from_value::<ClassificationConfig>(v.clone()) {
                Ok(c) => c,
                Err(e) => {
                    self.issue("/classification", format!("invalid classification rules: {e}"));
                    return None;
                }
            },
        };
        match ClassificationRules::build(lattice?, &config) {
            Ok(r) => Some(r),
            Err(e) => {
                self.issue("/classification", e.to_string());
                None
            }
        }
    }

    fn policies(&mut self, v: Option<&Value>, lists: &NamedLists) -> Vec<Policy> {
        let Some(items) = v.and_then(Value::as_array) else {
            self.issue("/policies", "policies must be an array");
            return Vec::new();
        };
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (i, item) in items.iter().enumerate() {
            let pointer = format!("/policies/{i}");
            if let Some(id) = item.get("id").and_then(Value::as_str) {
                if !seen.insert(id.to_owned()) {
                    self.issue(&format!("{pointer}/id"), format!("duplicate policy id {id:?}"));
                    continue;
                }
            }
            if let Some(p) = self.policy(item, &pointer, lists) {
                out.push(p);
            }
        }
        out
    }

    fn policy(&mut self, v: &Value, pointer: &str, lists: &NamedLists) -> Option<Policy> {
        let Some(obj) = v.as_object() else {
            self.issue(pointer, "policy must be an object");
            return None;
        };
        self.check_keys(obj, POLICY_KEYS, pointer);
        let before = self.issues.len();
        let id = match obj.get("id").and_then(Value::as_str) {
            Some(s) if !s.trim().is_empty() => s.to_owned(),
            _ => {
                self.issue(&format!("{pointer}/id"), "id must be a non-empty string");
                String::new()
            }
        };
        let expr = match obj.get("match") {
            None => {
                self.issue(pointer, "missing \"match\"");
                None
            }
            Some(m) => match Expr::compile(m, lists) {
                Ok(e) => Some(e),
                Err(errs) => {
                    for e in errs {
                        self.issue(&format!("{pointer}/match{}", e.pointer), e.message);
                    }
                    None
                }
            },
        };
        let decision = match obj.get("decision").and_then(Value::as_str).and_then(DecisionKind::parse) {
            Some(DecisionKind::Defer) | None => {
                self.issue(&format!("{pointer}/decision"), "decision must be ALLOW, DENY, MODIFY or STEP_UP");
                None
            }
            Some(k) => Some(k),
        };
        let priority = match obj.get("priority") {
            None => 0,
            Some(p) => p.as_u64().unwrap_or_else(|| {
                self.issue(&format!("{pointer}/priority"), "priority must be a non-negative integer");
                0
            }),
        };
        let reason = match obj.get("reason") {
            None => format!("matched policy {id}"),
            Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
            Some(_) => {
                self.issue(&format!("{pointer}/reason"), "reason must be a non-empty string");
                String::new()
            }
        };
        let flag = |this: &mut Self, key: &str| match obj.get(key) {
            None => false,
            Some(Value::Bool(b)) => *b,
            Some(_) => {
                this.issue(&format!("{pointer}/{key}"), format!("{key} must be a boolean"));
                false
            }
        };
        let forbidden = flag(self, "forbidden");
        let step_up = flag(self, "step_up");
        let transform = self.transform(obj.get("transform"), &format!("{pointer}/transform"));

        if let (Some(decision), Some(expr)) = (decision, &expr) {
            let requires_context = expr.references_context();
            if forbidden && decision != DecisionKind::Deny {
                self.issue(&format!("{pointer}/forbidden"), "forbidden policies must decide DENY");
            }
            if forbidden && requires_context {
                self.issue(&format!("{pointer}/match"), "forbidden policies may not reference context.* fields");
            }
            if forbidden && step_up {
                self.issue(&format!("{pointer}/step_up"), "forbidden policies cannot step up");
            }
            if step_up && !matches!(decision, DecisionKind::Allow | DecisionKind::StepUp) {
                self.issue(&format!("{pointer}/step_up"), "step_up applies to ALLOW or STEP_UP policies");
            }
            if decision == DecisionKind::Modify && transform.is_empty() {
                self.issue(&format!("{pointer}/transform"), "MODIFY policies need a non-empty transform");
            }
            if decision != DecisionKind::Modify && !transform.is_empty() {
                self.issue(&format!("{pointer}/transform"), "transform is only valid for MODIFY policies");
            }
        }
        if self.issues.len() > before {
            return None;
        }
        let expr = expr?;
        Some(Policy {
            id,
            requires_context: expr.references_context(),
            expr,
            decision: decision?,
            priority,
            reason,
            forbidden,
            transform,
            step_up,
        })
    }

    fn transform(&mut self, v: Option<&Value>, pointer: &str) -> Vec<Transform> {
        let Some(v) = v else { return Vec::new() };
        let Some(items) = v.as_array() else {
            self.issue(pointer, "transform must be an array of {\"path\", \"value\"}");
            return Vec::new();
        };
        let mut out = Vec::new();
        for (i, item) in items.iter().enumerate() {
            let ip = format!("{pointer}/{i}");
            let path = item.get("path").and_then(Value::as_str);
            let value = item.get("value");
            let extra = item.as_object().is_some_and(|o| o.keys().any(|k| k != "path" && k != "value"));
            match (path, value) {
                (Some(path), Some(value)) if !extra => {
                    let parts: Vec<String> = path.trim_start_matches("action.params.").split('.').map(str::to_owned).collect();
                    if parts.iter().any(String::is_empty) {
                        self.issue(&format!("{ip}/path"), format!("bad parameter path {path:?}"));
                    } else {
                        out.push(Transform { path: parts, value: value.clone() });
                    }
                }
                _ => self.issue(&ip, "transform entries must be {\"path\": string, \"value\": any}"),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    const EXFIL: &str = r#"{
  "version": 1,
  "named_lists": {"internal_domains": ["company.com"]},
  "policies": [
    {"id": "block_external_after_pii",
     "match": ["AND", ["==", "action.tool", "email"],
                      ["NOT_IN", "action.params.to", "@internal_domains"],
                      ["CONTAINS", "context.data_classification", "PII"]],
     "decision": "DENY", "priority": 100,
     "reason": "External email after PII access"},
    {"id": "block_drop_database",
     "match": ["MATCHES", "action.params.query", "(?i)DROP\\s+DATABASE"],
     "decision": "DENY", "priority": 1000, "forbidden": true,
     "reason": "Forbidden: DROP DATABASE"}
  ]
}"#;

    #[test]
    fn parses_the_reference_policies() {
        let ps = PolicySet::parse(EXFIL).unwrap();
        let p = ps.policy("block_external_after_pii").unwrap();
        assert!(p.requires_context && !p.forbidden);
        assert_eq!((p.decision, p.priority), (DecisionKind::Deny, 100));
        let f = ps.policy("block_drop_database").unwrap();
        assert!(f.forbidden && !f.requires_context);
        assert_eq!(ps.defaults(), &Defaults::default());
        assert_eq!(ps.digest().len(), 64);
        assert_eq!(ps.forbidden_any_tool, vec![1]);
    }

    #[test]
    fn digest_ignores_formatting() {
        let compact = serde_json::to_string(&serde_json::from_str::<Value>(EXFIL).unwrap()).unwrap();
        assert_eq!(PolicySet::parse(EXFIL).unwrap().digest(), PolicySet::parse(&compact).unwrap().digest());
    }

    #[test]
    fn unknown_context_field_is_located() {
        let text = "{\"policies\": [\n  {\"id\": \"p\", \"decision\": \"DENY\",\n   \"match\": [\"==\", \"context.nonexistent\", 1]}]}";
        let err = PolicySet::parse(text).unwrap_err();
        assert_eq!(err.issues.len(), 1);
        let issue = &err.issues[0];
        assert_eq!(issue.pointer, "/policies/0/match/1");
        assert_eq!((issue.line, issue.column), (3, 20));
        assert!(issue.message.contains("context.nonexistent"));
    }

    #[test]
    fn all_errors_reported() {
        let doc = json!({
            "named_lists": {"bad": [1]},
            "policies": [
                {"id": "a", "decision": "DENY", "match": ["IN", "action.tool", "@missing"]},
                {"id": "a", "decision": "DENY", "match": ["==", "action.tool", "x"]},
                {"id": "r", "decision": "DENY", "match": ["MATCHES", "action.tool", "(unclosed"]},
                {"id": "f", "decision": "ALLOW", "forbidden": true, "match": ["==", "action.tool", "x"]},
                {"id": "c", "decision": "DENY", "forbidden": true, "match": ["CONTAINS", "context.entities", "x"]},
                {"id": "m", "decision": "MODIFY", "match": ["==", "action.tool", "x"]},
                {"id": "d", "decision": "DEFER", "match": ["==", "action.tool", "x"], "extra": 1}
            ]
        });
        let err = PolicySet::parse(&doc.to_string()).unwrap_err();
        let pointers: Vec<&str> = err.issues.iter().map(|i| i.pointer.as_str()).collect();
        for want in [
            "/named_lists/bad",
            "/policies/0/match/2",
            "/policies/1/id",
            "/policies/2/match/2",
            "/policies/3/forbidden",
            "/policies/4/match",
            "/policies/5/transform",
            "/policies/6/extra",
            "/policies/6/decision",
        ] {
            assert!(pointers.contains(&want), "missing {want} in {pointers:?}");
        }
    }

    #[test]
    fn syntax_errors_have_positions() {
        let err = PolicySet::parse("{\n  \"policies\": [,]\n}").unwrap_err();
        assert_eq!(err.issues[0].line, 2);
    }

    #[test]
    fn transforms_apply_dotted_paths() {
        let params = json!({"to": "x@y.com", "opts": {"cc": "a"}}).as_object().unwrap().clone();
        let t = vec![
            Transform { path: vec!["opts".into(), "cc".into()], value: json!(null) },
            Transform { path: vec!["limits".into(), "rows".into()], value: json!(100) },
        ];
        let out = apply_transforms(&params, &t);
        assert_eq!(Value::Object(out), json!({"to": "x@y.com", "opts": {"cc": null}, "limits": {"rows": 100}}));
    }

    #[test]
    fn tool_pinned_forbidden_policies_are_indexed() {
        let doc = json!({"policies": [
            {"id": "a", "decision": "DENY", "forbidden": true, "match": ["AND", ["==", "action.tool", "shell"], ["MATCHES", "action.params.cmd", "rm -rf"]]},
            {"id": "b", "decision": "DENY", "forbidden": true, "match": ["IN", "action.tool", ["ftp", "shell"]]},
            {"id": "c", "decision": "ALLOW", "match": ["==", "action.tool", "shell"]}
        ]});
        let ps = PolicySet::parse(&doc.to_string()).unwrap();
        assert_eq!(ps.forbidden_candidates("shell").collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(ps.forbidden_candidates("ftp").collect::<Vec<_>>(), vec![1]);
        assert!(ps.forbidden_candidates("email").next().is_none());
        assert_eq!(ps.contextual, vec![2]);
    }
}
