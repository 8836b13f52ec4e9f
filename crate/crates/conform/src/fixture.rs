//! Scenario fixtures. The shipped set is compiled in; a directory of
//! the same files can be loaded instead.

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

/// The policy set a target must run for the conformance checks.
pub const POLICIES: &str = include_str!("../scenarios/policies.json");

pub const SCENARIO_IDS: &[&str] = &[
    "prompt_injection_exfil",
    "tool_output_injection",
    "confused_deputy_drop_table",
    "composition_exfiltration",
    "goal_hijack_upload",
    "intent_drift_johnson",
    "defer_credential_rotation",
];

const SHIPPED: &[&str] = &[
    include_str!("../scenarios/prompt_injection_exfil.json"),
    include_str!("../scenarios/tool_output_injection.json"),
    include_str!("../scenarios/confused_deputy_drop_table.json"),
    include_str!("../scenarios/composition_exfiltration.json"),
    include_str!("../scenarios/goal_hijack_upload.json"),
    include_str!("../scenarios/intent_drift_johnson.json"),
    include_str!("../scenarios/defer_credential_rotation.json"),
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    pub decision: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defer_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    Init {
        session: String,
        #[serde(default)]
        original_request: Option<String>,
    },
    Call {
        session: String,
        tool: String,
        operation: String,
        #[serde(default)]
        parameters: serde_json::Map<String, Value>,
        expect: Expect,
        /// Name under which a parked item is remembered.
        #[serde(default)]
        save: Option<String>,
    },
    AdvanceClock {
        seconds: i64,
    },
    Poll {
        session: String,
        item: String,
        expect: Expect,
    },
    Approve {
        item: String,
        verdict: String,
        expect_status: u16,
    },
    /// Cumulative drift never falls, ends above `threshold`, and the one
    /// escalation event names call `escalation_step` (1-based).
    ExpectDrift {
        session: String,
        threshold: f64,
        escalation_step: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub title: String,
    pub threat: String,
    pub steps: Vec<Step>,
}

impl Scenario {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Scenarios that move the shared clock cannot overlap others.
    pub fn uses_clock(&self) -> bool {
        self.steps.iter().any(|s| matches!(s, Step::AdvanceClock { .. }))
    }

    pub fn calls(&self) -> usize {
        self.steps.iter().filter(|s| matches!(s, Step::Call { .. })).count()
    }
}

pub fn shipped() -> Vec<Scenario> {
    SHIPPED.iter().map(|t| Scenario::parse(t).expect("shipped scenarios parse")).collect()
}

/// Every `*.json` scenario in `dir` except the policy set.
pub fn load_dir(dir: &Path) -> anyhow::Result<Vec<Scenario>> {
    let mut out = Vec::new();
    let mut paths: Vec<_> = std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.extension().is_some_and(|e| e == "json") && p.file_name().is_some_and(|n| n != "policies.json") {
            let text = std::fs::read_to_string(&p)?;
            out.push(Scenario::parse(&text).with_context(|| p.display().to_string())?);
        }
    }
    Ok(out)
}
