//! Conformance harness: requirement checks and the threat-scenario corpus,
//! run against a gateway over its wire protocol.

pub mod client;
pub mod fixture;
pub mod harness;
pub mod report;
pub mod requirements;
pub mod runner;

use fixture::Scenario;
use harness::Harness;
use report::{Outcome, Report};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Requirement ids to run; empty means all unless scenarios were picked.
    pub requirements: Vec<String>,
    /// Scenario ids to run; empty means all unless requirements were picked.
    pub scenarios: Vec<String>,
    /// Run scenarios that leave the clock alone concurrently.
    pub parallel: bool,
}

impl RunOptions {
    fn full(&self) -> bool {
        self.requirements.is_empty() && self.scenarios.is_empty()
    }
}

/// Requirements run first and one at a time, since several move the
/// shared clock. Scenarios follow.
pub async fn run(h: &Harness, corpus: &[Scenario], opts: &RunOptions) -> anyhow::Result<Report> {
    let req_ids: Vec<String> = if opts.full() {
        requirements::REQUIREMENTS.iter().map(|(id, _)| id.to_string()).collect()
    } else {
        opts.requirements.clone()
    };
    for id in &req_ids {
        anyhow::ensure!(requirements::title(id).is_some(), "unknown requirement {id:?}");
    }
    let picked: Vec<&Scenario> = if opts.full() {
        corpus.iter().collect()
    } else {
        let mut v = Vec::new();
        for id in &opts.scenarios {
            v.push(corpus.iter().find(|s| s.id == *id).ok_or_else(|| anyhow::anyhow!("unknown scenario {id:?}"))?);
        }
        v
    };

    let mut reqs = Vec::new();
    for id in &req_ids {
        reqs.push(requirements::run(h, id).await);
    }

    let mut scenarios: Vec<Option<Outcome>> = vec![None; picked.len()];
    if opts.parallel {
        let independent: Vec<usize> = (0..picked.len()).filter(|i| !picked[*i].uses_clock()).collect();
        let runs = independent.iter().map(|i| runner::run_scenario(h, picked[*i], "sc-"));
        for (i, o) in independent.iter().zip(futures::future::join_all(runs).await) {
            scenarios[*i] = Some(o);
        }
    }
    for (i, s) in picked.iter().enumerate() {
        if scenarios[i].is_none() {
            scenarios[i] = Some(runner::run_scenario(h, s, "sc-").await);
        }
    }
    Ok(Report::new(h.label.clone(), reqs, scenarios.into_iter().flatten().collect()))
}
