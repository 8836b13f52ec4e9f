//! Data classification and entity extraction for the context ledger.
//!
//! Labels come from three sources, unioned: explicit `_classification`
//! markers in tool outputs, regex pattern hits, and tool/operation mapping
//! rules. A tool output that yields no label from any source is assigned
//! the highest label of the lattice. Request parameters get no default.

use crate::model::Action;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeSet;
use std::sync::OnceLock;

pub const CLASSIFICATION_KEY: &str = "_classification";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ClassificationConfigError {
    #[error("classification lattice must not be empty")]
    EmptyLattice,
    #[error("duplicate lattice label {0:?}")]
    DuplicateLabel(String),
    #[error("rule label {0:?} is not in the lattice")]
    UnknownLabel(String),
    #[error("pattern {pattern:?} does not compile: {message}")]
    BadPattern { pattern: String, message: String },
}

/// Ordered sensitivity labels, lowest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Lattice(Vec<String>);

impl Lattice {
    pub fn new(labels: Vec<String>) -> Result<Self, ClassificationConfigError> {
        if labels.is_empty() {
            return Err(ClassificationConfigError::EmptyLattice);
        }
        let mut seen = BTreeSet::new();
        for label in &labels {
            if !seen.insert(label.as_str()) {
                return Err(ClassificationConfigError::DuplicateLabel(label.clone()));
            }
        }
        Ok(Lattice(labels))
    }

    pub fn highest(&self) -> &str {
        self.0.last().map(String::as_str).unwrap_or("PII")
    }

    pub fn contains(&self, label: &str) -> bool {
        self.0.iter().any(|l| l == label)
    }

    pub fn rank(&self, label: &str) -> Option<usize> {
        self.0.iter().position(|l| l == label)
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }
}

impl Default for Lattice {
    fn default() -> Self {
        Lattice(["PUBLIC", "INTERNAL", "CONFIDENTIAL", "PII"].map(String::from).to_vec())
    }
}

impl TryFrom<Vec<String>> for Lattice {
    type Error = ClassificationConfigError;
    fn try_from(labels: Vec<String>) -> Result<Self, Self::Error> {
        Lattice::new(labels)
    }
}

impl From<Lattice> for Vec<String> {
    fn from(l: Lattice) -> Self {
        l.0
    }
}

/// Rule configuration as it appears in the policy document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassificationConfig {
    #[serde(default = "default_true")]
    pub default_patterns: bool,
    #[serde(default)]
    pub patterns: Vec<PatternRule>,
    #[serde(default)]
    pub tools: Vec<ToolRule>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternRule {
    pub label: String,
    pub regex: String,
}

/// Maps a tool (and optionally one operation; `None` or `"*"` means any)
/// to a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolRule {
    pub tool: String,
    #[serde(default)]
    pub operation: Option<String>,
    pub label: String,
}

impl ToolRule {
    fn applies(&self, action: &Action) -> bool {
        self.tool == action.tool
            && match self.operation.as_deref() {
                None | Some("*") => true,
                Some(op) => op == action.operation,
            }
    }
}

/// Compiled classification rules.
#[derive(Debug, Clone)]
pub struct ClassificationRules {
    lattice: Lattice,
    patterns: Vec<(Regex, String)>,
    /// Applied to outputs only: addresses in request parameters are
    /// routing data and are tracked as entities instead.
    email_label: Option<String>,
    card_label: Option<String>,
    tools: Vec<ToolRule>,
}

/// What is being classified.
#[derive(Debug, Clone, Copy)]
pub enum DataSource<'a> {
    /// The request parameters of an action.
    Request(&'a Action),
    /// The tool result returned for an action.
    Output { action: &'a Action, output: &'a Value },
}

impl ClassificationRules {
    pub fn build(
        lattice: Lattice,
        config: &ClassificationConfig,
    ) -> Result<Self, ClassificationConfigError> {
        let mut patterns = Vec::new();
        let mut card_label = None;
        let mut email_label = None;
        if config.default_patterns {
            let pii = lattice.highest().to_owned();
            email_label = Some(pii.clone());
            patterns.push((Regex::new(r"\b\d{3}-\d{2}-\d{4}\b").expect("ssn regex"), pii.clone()));
            card_label = Some(pii);
        }
        for rule in &config.patterns {
            if !lattice.contains(&rule.label) {
                return Err(ClassificationConfigError::UnknownLabel(rule.label.clone()));
            }
            let re = Regex::new(&rule.regex).map_err(|e| ClassificationConfigError::BadPattern {
                pattern: rule.regex.clone(),
                message: e.to_string(),
            })?;
            patterns.push((re, rule.label.clone()));
        }
        for rule in &config.tools {
            if !lattice.contains(&rule.label) {
                return Err(ClassificationConfigError::UnknownLabel(rule.label.clone()));
            }
        }
        Ok(ClassificationRules { lattice, patterns, email_label, card_label, tools: config.tools.clone() })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn classify(&self, source: DataSource<'_>) -> BTreeSet<String> {
        let mut labels = BTreeSet::new();
        let (action, value, is_output) = match source {
            DataSource::Request(action) => (action, None, false),
            DataSource::Output { action, output } => (action, Some(output), true),
        };
        if let Some(output) = value {
            self.explicit_labels(output, &mut labels);
            self.scan(output, &mut labels);
            if let Some(label) = &self.email_label {
                if has_email(output) {
                    labels.insert(label.clone());
                }
            }
        } else {
            for v in action.parameters.values() {
                self.scan(v, &mut labels);
            }
        }
        for rule in &self.tools {
            if rule.applies(action) {
                labels.insert(rule.label.clone());
            }
        }
        if is_output && labels.is_empty() {
            labels.insert(self.lattice.highest().to_owned());
        }
        labels
    }

    fn explicit_labels(&self, value: &Value, out: &mut BTreeSet<String>) {
        match value {
            Value::Object(map) => {
                for (k, v) in map {
                    if k == CLASSIFICATION_KEY {
                        let found: Vec<&str> = match v {
                            Value::String(s) => vec![s.as_str()],
                            Value::Array(items) => items.iter().filter_map(Value::as_str).collect(),
                            _ => Vec::new(),
                        };
                        for label in found {
                            // Unknown labels are treated as the most sensitive.
                            let label =
                                if self.lattice.contains(label) { label } else { self.lattice.highest() };
                            out.insert(label.to_owned());
                        }
                    } else {
                        self.explicit_labels(v, out);
                    }
                }
            }
            Value::Array(items) => items.iter().for_each(|v| self.explicit_labels(v, out)),
            _ => {}
        }
    }

    fn scan(&self, value: &Value, out: &mut BTreeSet<String>) {
        match value {
            Value::String(s) => self.scan_text(s, out),
            Value::Number(n) => self.scan_text(&n.to_string(), out),
            Value::Array(items) => items.iter().for_each(|v| self.scan(v, out)),
            Value::Object(map) => {
                for (k, v) in map {
                    if k != CLASSIFICATION_KEY {
                        self.scan(v, out);
                    }
                }
            }
            _ => {}
        }
    }

    fn scan_text(&self, text: &str, out: &mut BTreeSet<String>) {
        for (re, label) in &self.patterns {
            if !out.contains(label) && re.is_match(text) {
                out.insert(label.clone());
            }
        }
        if let Some(label) = &self.card_label {
            if !out.contains(label) && contains_card_number(text) {
                out.insert(label.clone());
            }
        }
    }
}

impl Default for ClassificationRules {
    fn default() -> Self {
        ClassificationRules::build(Lattice::default(), &ClassificationConfig {
            default_patterns: true,
            ..Default::default()
        })
        .expect("default rules compile")
    }
}

fn has_email(value: &Value) -> bool {
    match value {
        Value::String(s) => email_regex().is_match(s),
        Value::Array(items) => items.iter().any(has_email),
        Value::Object(map) => map.iter().any(|(k, v)| k != CLASSIFICATION_KEY && has_email(v)),
        _ => false,
    }
}

fn email_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"[A-Za-z0-9._%+\-]+@[A-Za-z0-9\-]+(?:\.[A-Za-z0-9\-]+)*\.[A-Za-z]{2,}")
            .expect("email regex")
    })
}

fn domain_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(?:[a-z0-9](?:[a-z0-9\-]{0,61}[a-z0-9])?\.)+[a-z]{2,24}\b")
            .expect("domain regex")
    })
}

fn digit_run_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d{13,19}").expect("digit regex"))
}

/// True if `text` holds a standalone 13–19 digit run passing the Luhn check.
pub fn contains_card_number(text: &str) -> bool {
    let bytes = text.as_bytes();
    digit_run_regex().find_iter(text).any(|m| {
        let before = m.start().checked_sub(1).map(|i| bytes[i].is_ascii_digit()).unwrap_or(false);
        let after = bytes.get(m.end()).map(u8::is_ascii_digit).unwrap_or(false);
        !before && !after && luhn_valid(m.as_str())
    })
}

pub fn luhn_valid(digits: &str) -> bool {
    let mut sum = 0u32;
    for (i, c) in digits.bytes().rev().enumerate() {
        if !c.is_ascii_digit() {
            return false;
        }
        let mut d = (c - b'0') as u32;
        if i % 2 == 1 {
            d *= 2;
            if d > 9 {
                d -= 9;
            }
        }
        sum += d;
    }
    !digits.is_empty() && sum.is_multiple_of(10)
}

const ENTITY_KEYS: [&str; 3] = ["id", "user", "account"];

/// Emails, DNS-name-shaped tokens, and values held under keys named
/// `id`, `user` or `account` (case-insensitive).
pub fn extract_entities(value: &Value, out: &mut BTreeSet<String>) {
    match value {
        Value::String(s) => harvest(s, out),
        Value::Array(items) => items.iter().for_each(|v| extract_entities(v, out)),
        Value::Object(map) => {
            for (k, v) in map {
                if ENTITY_KEYS.iter().any(|e| k.eq_ignore_ascii_case(e)) {
                    match v {
                        Value::String(s) if !s.is_empty() => {
                            out.insert(s.clone());
                        }
                        Value::Number(n) => {
                            out.insert(n.to_string());
                        }
                        _ => {}
                    }
                }
                if k != CLASSIFICATION_KEY {
                    extract_entities(v, out);
                }
            }
        }
        _ => {}
    }
}

fn harvest(text: &str, out: &mut BTreeSet<String>) {
    for m in email_regex().find_iter(text) {
        out.insert(m.as_str().to_ascii_lowercase());
    }
    for m in domain_regex().find_iter(text) {
        // Skip the domain halves of emails already collected.
        let preceded_by_at = m.start() > 0 && text.as_bytes()[m.start() - 1] == b'@';
        if !preceded_by_at {
            out.insert(m.as_str().to_ascii_lowercase());
        }
    }
}
