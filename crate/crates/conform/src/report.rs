//! Conformance results, levels, and their JSON and text renderings.

use serde::Serialize;
use serde_json::Value;
use std::fmt::{Debug, Write};

pub const CORE: &str = "AARM Core";
pub const EXTENDED: &str = "AARM Extended";
pub const CORE_REQUIREMENTS: &[&str] = &["R1", "R2", "R3", "R4", "R5", "R6"];
pub const EXTENDED_REQUIREMENTS: &[&str] = &["R1", "R2", "R3", "R4", "R5", "R6", "R7", "R8"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }

    pub fn equal<T: Debug + PartialEq>(name: impl Into<String>, got: T, want: T) -> Self {
        let passed = got == want;
        let detail = if passed { String::new() } else { format!("got {got:?}, want {want:?}") };
        Check { name: name.into(), passed, detail }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub id: String,
    pub title: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub checks: Vec<Check>,
    /// Receipts, call logs, event exports or a transcript.
    #[serde(skip_serializing_if = "Value::is_null")]
    pub evidence: Value,
}

impl Outcome {
    pub fn from_checks(id: &str, title: &str, checks: Vec<Check>, evidence: Value) -> Self {
        let status = if checks.iter().all(|c| c.passed) { Status::Pass } else { Status::Fail };
        Outcome { id: id.into(), title: title.into(), status, reason: None, checks, evidence }
    }

    pub fn skipped(id: &str, title: &str, reason: impl Into<String>) -> Self {
        Outcome { id: id.into(), title: title.into(), status: Status::Skipped, reason: Some(reason.into()), checks: vec![], evidence: Value::Null }
    }

    pub fn failed(id: &str, title: &str, reason: impl Into<String>, checks: Vec<Check>) -> Self {
        Outcome { id: id.into(), title: title.into(), status: Status::Fail, reason: Some(reason.into()), checks, evidence: Value::Null }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub target: String,
    pub requirements: Vec<Outcome>,
    pub scenarios: Vec<Outcome>,
    /// Every requirement R1 to R8 was run.
    pub complete: bool,
    /// `none`, `AARM Core`, `AARM Extended`, or `not assessed` for partial runs.
    pub level: String,
}

fn all_pass(reqs: &[Outcome], ids: &[&str]) -> bool {
    ids.iter().all(|id| reqs.iter().any(|r| r.id == *id && r.status == Status::Pass))
}

/// The level a set of requirement outcomes earns.
pub fn level(reqs: &[Outcome]) -> &'static str {
    if all_pass(reqs, EXTENDED_REQUIREMENTS) {
        EXTENDED
    } else if all_pass(reqs, CORE_REQUIREMENTS) {
        CORE
    } else {
        "none"
    }
}

impl Report {
    pub fn new(target: String, requirements: Vec<Outcome>, scenarios: Vec<Outcome>) -> Self {
        let complete = EXTENDED_REQUIREMENTS.iter().all(|id| requirements.iter().any(|r| r.id == *id));
        let level = if complete { level(&requirements).to_owned() } else { "not assessed".to_owned() };
        Report { target, requirements, scenarios, complete, level }
    }

    /// A full run succeeds at AARM Core or better; a partial run succeeds
    /// when everything it ran passed.
    pub fn success(&self) -> bool {
        if self.complete {
            self.level == CORE || self.level == EXTENDED
        } else {
            self.requirements.iter().chain(&self.scenarios).all(|o| o.status != Status::Fail)
                && self.requirements.iter().chain(&self.scenarios).any(|o| o.status == Status::Pass)
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "AARM conformance report");
        let _ = writeln!(s, "target: {}", self.target);
        let line = |s: &mut String, o: &Outcome| {
            let status = match o.status {
                Status::Pass => "PASS".to_owned(),
                Status::Fail => "FAIL".to_owned(),
                Status::Skipped => format!("SKIPPED({})", o.reason.as_deref().unwrap_or("")),
            };
            let _ = writeln!(s, "{:<4} {:<42} {status}", o.id, o.title);
            if o.status == Status::Fail {
                if let Some(r) = &o.reason {
                    let _ = writeln!(s, "       ! {r}");
                }
                for c in o.checks.iter().filter(|c| !c.passed) {
                    let _ = writeln!(s, "       x {}: {}", c.name, c.detail);
                }
            }
        };
        if !self.requirements.is_empty() {
            let _ = writeln!(s, "\nrequirements");
            self.requirements.iter().for_each(|o| line(&mut s, o));
        }
        if !self.scenarios.is_empty() {
            let _ = writeln!(s, "\nthreat scenarios");
            for o in &self.scenarios {
                let status = match o.status {
                    Status::Pass => "PASS",
                    Status::Fail => "FAIL",
                    Status::Skipped => "SKIPPED",
                };
                let _ = writeln!(s, "  {:<40} {status}", o.id);
                for c in o.checks.iter().filter(|c| !c.passed) {
                    let _ = writeln!(s, "       x {}: {}", c.name, c.detail);
                }
                if let (Status::Skipped | Status::Fail, Some(r)) = (o.status, &o.reason) {
                    let _ = writeln!(s, "       ! {r}");
                }
            }
        }
        let _ = writeln!(s, "\nlevel: {}", self.level);
        s
    }
}
