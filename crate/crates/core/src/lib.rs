//! Runtime authorization for agent tool calls: action model, context
//! ledger, policy evaluation, decision orchestration and signed receipts.

pub mod canonical;
pub mod classify;
pub mod clock;
pub mod ids;
pub mod intent;
pub mod ledger;
pub mod model;
pub mod orchestrator;
pub mod policy;
pub mod receipt;
pub mod telemetry;
