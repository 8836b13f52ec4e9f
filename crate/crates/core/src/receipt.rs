//! Signed decision receipts.
//!
//! Every receipt is signed with Ed25519 over the canonical bytes of the
//! receipt without its `signature` member, and stored one per line in
//! `receipts.jsonl`. Verification needs only that file and `keys.json`.

use crate::canonical::{self, CanonicalError};
use crate::clock::Clock;
use crate::ids::IdGen;
use crate::model::{format_utc, parse_utc, DecisionKind, DeferReason, Identity, Params};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ed25519_dalek::{Signature as EdSignature, Signer as _, SigningKey, Verifier as _, VerifyingKey};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const ALGORITHM: &str = "Ed25519";
pub const REDACTED_KEY: &str = "_redacted";
pub const RECEIPTS_FILE: &str = "receipts.jsonl";
pub const KEYS_FILE: &str = "keys.json";

#[derive(Debug, thiserror::Error)]
pub enum ReceiptError {
    #[error("signing key unavailable: {0}")]
    SigningUnavailable(String),
    #[error("receipt store error: {0}")]
    Store(String),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
    #[error("malformed time range: {0}")]
    BadTimeRange(String),
    #[error("key material: {0}")]
    Key(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiptAction {
    pub tool: String,
    pub operation: String,
    pub parameters: Params,
    pub timestamp: String,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiptContext {
    pub session_id: String,
    pub context_snapshot_digest: String,
    pub data_classifications: BTreeSet<String>,
    pub cumulative_drift: Option<f64>,
    pub deferred_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiptDecision {
    pub kind: DecisionKind,
    pub matched_policies: Vec<String>,
    pub reason: String,
    pub policy_set_digest: String,
    /// Parameters actually forwarded, for MODIFY.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modified_parameters: Option<Params>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Allow,
    Deny,
}

impl Verdict {
    pub fn parse(s: &str) -> Option<Verdict> {
        match s {
            "ALLOW" => Some(Verdict::Allow),
            "DENY" => Some(Verdict::Deny),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Approval {
    pub approver: String,
    pub verdict: Verdict,
    pub timestamp: String,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResolutionMethod {
    #[serde(rename = "human_allow")]
    HumanAllow,
    #[serde(rename = "human_deny")]
    HumanDeny,
    #[serde(rename = "re-evaluation")]
    ReEvaluation,
    #[serde(rename = "timeout")]
    Timeout,
}

impl ResolutionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ResolutionMethod::HumanAllow => "human_allow",
            ResolutionMethod::HumanDeny => "human_deny",
            ResolutionMethod::ReEvaluation => "re-evaluation",
            ResolutionMethod::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deferral {
    pub defer_reason: Option<DeferReason>,
    pub resolution_method: Option<ResolutionMethod>,
    pub resolution_timestamp: Option<String>,
    pub parent_receipt_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutcomeStatus {
    Executed,
    ExecutedWithError,
    Blocked,
    Parked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub status: OutcomeStatus,
    pub error: Option<String>,
}

impl Outcome {
    pub fn new(status: OutcomeStatus) -> Self {
        Outcome { status, error: None }
    }

    pub fn failed(error: impl Into<String>) -> Self {
        Outcome { status: OutcomeStatus::ExecutedWithError, error: Some(error.into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiptSignature {
    pub algorithm: String,
    pub key_id: String,
    pub value: String,
}

/// Everything a receipt records except what the vault assigns.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceiptMaterials {
    pub action: ReceiptAction,
    pub context: ReceiptContext,
    pub identity: Identity,
    pub decision: ReceiptDecision,
    pub approval: Option<Approval>,
    pub deferral: Option<Deferral>,
    pub outcome: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub receipt_id: String,
    pub schema_version: u32,
    pub action: ReceiptAction,
    pub context: ReceiptContext,
    pub identity: Identity,
    pub decision: ReceiptDecision,
    pub approval: Option<Approval>,
    pub deferral: Option<Deferral>,
    pub outcome: Option<Outcome>,
    pub issued_at: String,
    pub signature: ReceiptSignature,
}

impl Receipt {
    pub fn session_id(&self) -> &str {
        &self.context.session_id
    }

    pub fn parent_receipt_id(&self) -> Option<&str> {
        self.deferral.as_ref().and_then(|d| d.parent_receipt_id.as_deref())
    }
}

/// Produces signatures for receipts.
pub trait Signer: Send + Sync {
    fn key_id(&self) -> &str;
    fn public_key(&self) -> [u8; 32];
    fn sign(&self, message: &[u8]) -> Result<[u8; 64], ReceiptError>;
}

/// First 8 hex chars of SHA-256 of the raw public key.
pub fn key_id_for(public_key: &[u8; 32]) -> String {
    canonical::sha256_hex(public_key)[..8].to_owned()
}

pub struct Ed25519Signer {
    key: SigningKey,
    key_id: String,
}

impl Ed25519Signer {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        let key = SigningKey::from_bytes(&seed);
        let key_id = key_id_for(&key.verifying_key().to_bytes());
        Ed25519Signer { key, key_id }
    }

    pub fn generate() -> Self {
        Ed25519Signer::from_seed(rand::random())
    }

    /// Read a base64-encoded 32-byte seed.
    pub fn load(path: &Path) -> Result<Self, ReceiptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ReceiptError::SigningUnavailable(format!("{}: {e}", path.display())))?;
        let bytes = B64
            .decode(text.trim())
            .map_err(|e| ReceiptError::Key(format!("{}: not base64: {e}", path.display())))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| ReceiptError::Key(format!("{}: expected a 32-byte seed", path.display())))?;
        Ok(Ed25519Signer::from_seed(seed))
    }

    /// Write the seed as base64, owner-readable only where supported.
    pub fn save(&self, path: &Path) -> Result<(), ReceiptError> {
        let mut opts = OpenOptions::new();
        opts.write(true).create_new(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::OpenOptionsExt;
            opts.mode(0o600);
        }
        let mut f = opts.open(path).map_err(|e| ReceiptError::Key(format!("{}: {e}", path.display())))?;
        writeln!(f, "{}", B64.encode(self.key.to_bytes())).map_err(|e| ReceiptError::Key(e.to_string()))
    }

    /// Load the key at `path`, creating it first if absent.
    pub fn load_or_create(path: &Path) -> Result<Self, ReceiptError> {
        if path.exists() {
            return Ed25519Signer::load(path);
        }
        let s = Ed25519Signer::generate();
        s.save(path)?;
        Ok(s)
    }
}

impl Signer for Ed25519Signer {
    fn key_id(&self) -> &str {
        &self.key_id
    }

    fn public_key(&self) -> [u8; 32] {
        self.key.verifying_key().to_bytes()
    }

    fn sign(&self, message: &[u8]) -> Result<[u8; 64], ReceiptError> {
        Ok(self.key.sign(message).to_bytes())
    }
}

/// Published verification keys, as in `keys.json`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PublicKeys {
    keys: BTreeMap<String, VerifyingKey>,
}

impl PublicKeys {
    pub fn insert(&mut self, public_key: [u8; 32]) -> Result<String, ReceiptError> {
        let vk = VerifyingKey::from_bytes(&public_key).map_err(|e| ReceiptError::Key(e.to_string()))?;
        let id = key_id_for(&public_key);
        self.keys.insert(id.clone(), vk);
        Ok(id)
    }

    pub fn get(&self, key_id: &str) -> Option<&VerifyingKey> {
        self.keys.get(key_id)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn to_json(&self) -> Value {
        Value::Object(
            self.keys.iter().map(|(id, k)| (id.clone(), Value::String(B64.encode(k.to_bytes())))).collect(),
        )
    }

    pub fn from_json(v: &Value) -> Result<Self, ReceiptError> {
        let obj = v.as_object().ok_or_else(|| ReceiptError::Key("keys.json must be an object".into()))?;
        let mut keys = PublicKeys::default();
        for (id, b64) in obj {
            let bytes = b64
                .as_str()
                .and_then(|s| B64.decode(s).ok())
                .ok_or_else(|| ReceiptError::Key(format!("key {id}: not base64")))?;
            let raw: [u8; 32] =
                bytes.try_into().map_err(|_| ReceiptError::Key(format!("key {id}: expected 32 bytes")))?;
            let derived = keys.insert(raw)?;
            if &derived != id {
                return Err(ReceiptError::Key(format!("key {id}: id does not match key (expected {derived})")));
            }
        }
        Ok(keys)
    }

    pub fn load(path: &Path) -> Result<Self, ReceiptError> {
        let text = std::fs::read_to_string(path).map_err(|e| ReceiptError::Key(format!("{}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| ReceiptError::Key(format!("{}: {e}", path.display())))?;
        PublicKeys::from_json(&v)
    }

    /// Merge into an existing `keys.json` so rotated-out keys stay published.
    pub fn publish(&self, path: &Path) -> Result<(), ReceiptError> {
        let mut all = if path.exists() { PublicKeys::load(path)? } else { PublicKeys::default() };
        all.keys.extend(self.keys.iter().map(|(k, v)| (k.clone(), *v)));
        let text = serde_json::to_string_pretty(&all.to_json()).expect("keys serialize");
        std::fs::write(path, text + "\n").map_err(|e| ReceiptError::Store(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerifyFailure {
    Malformed(String),
    UnknownKey(String),
    UnsupportedAlgorithm(String),
    SignatureMismatch,
}

impl std::fmt::Display for VerifyFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VerifyFailure::Malformed(m) => write!(f, "malformed receipt: {m}"),
            VerifyFailure::UnknownKey(k) => write!(f, "unknown key {k}"),
            VerifyFailure::UnsupportedAlgorithm(a) => write!(f, "unsupported algorithm {a}"),
            VerifyFailure::SignatureMismatch => f.write_str("signature mismatch"),
        }
    }
}

fn signing_bytes(mut v: Value) -> Result<Vec<u8>, VerifyFailure> {
    let obj = v.as_object_mut().ok_or_else(|| VerifyFailure::Malformed("not an object".into()))?;
    obj.shift_remove("signature");
    Ok(canonical::value_to_canonical_string(&v).into_bytes())
}

/// Verify a receipt as stored (a parsed JSON line). Works offline.
pub fn verify_receipt_value(v: &Value, keys: &PublicKeys) -> Result<(), VerifyFailure> {
    let sig = v.get("signature").ok_or_else(|| VerifyFailure::Malformed("no signature".into()))?;
    let field = |k: &str| {
        sig.get(k).and_then(Value::as_str).ok_or_else(|| VerifyFailure::Malformed(format!("signature.{k} missing")))
    };
    let algorithm = field("algorithm")?;
    if algorithm != ALGORITHM {
        return Err(VerifyFailure::UnsupportedAlgorithm(algorithm.to_owned()));
    }
    let key_id = field("key_id")?;
    let key = keys.get(key_id).ok_or_else(|| VerifyFailure::UnknownKey(key_id.to_owned()))?;
    let raw = B64.decode(field("value")?).map_err(|_| VerifyFailure::SignatureMismatch)?;
    let raw: [u8; 64] = raw.try_into().map_err(|_| VerifyFailure::SignatureMismatch)?;
    let message = signing_bytes(v.clone())?;
    key.verify(&message, &EdSignature::from_bytes(&raw)).map_err(|_| VerifyFailure::SignatureMismatch)
}

pub fn verify_receipt(r: &Receipt, keys: &PublicKeys) -> Result<(), VerifyFailure> {
    let v = canonical::to_value(r).map_err(|e| VerifyFailure::Malformed(e.to_string()))?;
    verify_receipt_value(&v, keys)
}

/// Result for one line of a receipts file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineVerdict {
    pub line: usize,
    pub receipt_id: Option<String>,
    pub result: Result<(), VerifyFailure>,
}

/// Verify every line of receipts text. Lines must be the canonical form of
/// the receipt they hold.
pub fn verify_receipts_text(text: &str, keys: &PublicKeys) -> Vec<LineVerdict> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let verdict = match serde_json::from_str::<Value>(line) {
            Err(e) => LineVerdict { line: i + 1, receipt_id: None, result: Err(VerifyFailure::Malformed(e.to_string())) },
            Ok(v) => {
                let receipt_id = v.get("receipt_id").and_then(Value::as_str).map(str::to_owned);
                let result = if canonical::value_to_canonical_string(&v) != line {
                    Err(VerifyFailure::Malformed("line is not canonical JSON".into()))
                } else {
                    verify_receipt_value(&v, keys)
                };
                LineVerdict { line: i + 1, receipt_id, result }
            }
        };
        out.push(verdict);
    }
    out
}

/// Replace values of the listed top-level parameter keys with a digest.
pub fn redact(params: &Params, keys: &BTreeSet<String>) -> Params {
    if keys.is_empty() {
        return params.clone();
    }
    params
        .iter()
        .map(|(k, v)| {
            if keys.contains(k) {
                let digest = canonical::canonical_digest(v).expect("JSON values are finite");
                (k.clone(), serde_json::json!({ REDACTED_KEY: digest }))
            } else {
                (k.clone(), v.clone())
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct ReceiptFilter {
    pub session_id: Option<String>,
    pub kinds: Option<Vec<DecisionKind>>,
    pub from: Option<String>,
    pub to: Option<String>,
    pub tool: Option<String>,
}

struct Store {
    file: Option<File>,
    last_issued: Option<chrono::DateTime<chrono::Utc>>,
    receipts: Vec<Receipt>,
    by_id: HashMap<String, usize>,
}

/// Signs, stores and serves receipts. Appends are totally ordered.
pub struct ReceiptVault {
    signer: Arc<dyn Signer>,
    ids: Arc<IdGen>,
    clock: Arc<dyn Clock>,
    redact_keys: BTreeSet<String>,
    path: Option<PathBuf>,
    store: Mutex<Store>,
}

impl ReceiptVault {
    pub fn in_memory(signer: Arc<dyn Signer>, ids: Arc<IdGen>, clock: Arc<dyn Clock>) -> Self {
        ReceiptVault {
            signer,
            ids,
            clock,
            redact_keys: BTreeSet::new(),
            path: None,
            store: Mutex::new(Store { file: None, last_issued: None, receipts: Vec::new(), by_id: HashMap::new() }),
        }
    }

    /// Open `dir/receipts.jsonl`, loading receipts already there.
    pub fn open(
        dir: &Path,
        signer: Arc<dyn Signer>,
        ids: Arc<IdGen>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ReceiptError> {
        std::fs::create_dir_all(dir).map_err(|e| ReceiptError::Store(e.to_string()))?;
        let path = dir.join(RECEIPTS_FILE);
        let mut receipts = Vec::new();
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| ReceiptError::Store(e.to_string()))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let r: Receipt = serde_json::from_str(line)
                    .map_err(|e| ReceiptError::Store(format!("{}:{}: {e}", path.display(), i + 1)))?;
                receipts.push(r);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| ReceiptError::Store(format!("{}: {e}", path.display())))?;
        let by_id = receipts.iter().enumerate().map(|(i, r)| (r.receipt_id.clone(), i)).collect();
        let last_issued = receipts.iter().filter_map(|r| parse_utc(&r.issued_at)).max();
        let mut keys = PublicKeys::default();
        keys.insert(signer.public_key())?;
        keys.publish(&dir.join(KEYS_FILE))?;
        Ok(ReceiptVault {
            signer,
            ids,
            clock,
            redact_keys: BTreeSet::new(),
            path: Some(path),
            store: Mutex::new(Store { file: Some(file), last_issued, receipts, by_id }),
        })
    }

    pub fn with_redaction(mut self, keys: impl IntoIterator<Item = String>) -> Self {
        self.redact_keys = keys.into_iter().collect();
        self
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn public_keys(&self) -> PublicKeys {
        let mut k = PublicKeys::default();
        k.insert(self.signer.public_key()).expect("signer key is valid");
        k
    }

    /// Fail fast before an action runs if a receipt could not be signed.
    pub fn ready(&self) -> Result<(), ReceiptError> {
        self.signer.sign(b"readiness probe").map(|_| ())
    }

    pub fn issue(&self, m: ReceiptMaterials) -> Result<Receipt, ReceiptError> {
        let mut action = m.action;
        action.parameters = redact(&action.parameters, &self.redact_keys);
        let mut decision = m.decision;
        decision.modified_parameters = decision.modified_parameters.map(|p| redact(&p, &self.redact_keys));
        let mut store = self.store.lock();
        // Strictly increasing so time order is issuance order even when
        // the clock stands still or steps back.
        let mut issued = self.clock.now();
        if let Some(last) = store.last_issued {
            if issued <= last {
                issued = last + chrono::Duration::milliseconds(1);
            }
        }
        let mut receipt = Receipt {
            receipt_id: self.ids.next_uuid(),
            schema_version: 1,
            action,
            context: m.context,
            identity: m.identity,
            decision,
            approval: m.approval,
            deferral: m.deferral,
            outcome: m.outcome,
            issued_at: format_utc(issued),
            signature: ReceiptSignature {
                algorithm: ALGORITHM.to_owned(),
                key_id: self.signer.key_id().to_owned(),
                value: String::new(),
            },
        };
        let message = signing_bytes(canonical::to_value(&receipt)?)
            .map_err(|e| ReceiptError::Store(e.to_string()))?;
        receipt.signature.value = B64.encode(self.signer.sign(&message)?);
        let line = canonical::to_canonical_string(&receipt)?;
        if let Some(f) = store.file.as_mut() {
            f.write_all(format!("{line}\n").as_bytes()).map_err(|e| ReceiptError::Store(e.to_string()))?;
        }
        store.last_issued = Some(issued);
        let idx = store.receipts.len();
        store.by_id.insert(receipt.receipt_id.clone(), idx);
        store.receipts.push(receipt.clone());
        Ok(receipt)
    }

    pub fn get(&self, receipt_id: &str) -> Option<Receipt> {
        let store = self.store.lock();
        store.by_id.get(receipt_id).map(|&i| store.receipts[i].clone())
    }

    pub fn len(&self) -> usize {
        self.store.lock().receipts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Receipts matching every given filter field, ordered by issued_at
    /// then receipt_id.
    pub fn query(&self, filter: &ReceiptFilter) -> Result<Vec<Receipt>, ReceiptError> {
        let bound = |s: &Option<String>| match s {
            None => Ok(None),
            Some(s) => parse_utc(s).map(Some).ok_or_else(|| ReceiptError::BadTimeRange(format!("{s:?} is not RFC 3339 UTC"))),
        };
        let (from, to) = (bound(&filter.from)?, bound(&filter.to)?);
        if let (Some(f), Some(t)) = (from, to) {
            if f > t {
                return Err(ReceiptError::BadTimeRange("from is after to".into()));
            }
        }
        let store = self.store.lock();
        let mut out: Vec<(chrono::DateTime<chrono::Utc>, Receipt)> = store
            .receipts
            .iter()
            .filter(|r| filter.session_id.as_deref().is_none_or(|s| r.context.session_id == s))
            .filter(|r| filter.tool.as_deref().is_none_or(|t| r.action.tool == t))
            .filter(|r| filter.kinds.as_ref().is_none_or(|ks| ks.contains(&r.decision.kind)))
            .filter_map(|r| parse_utc(&r.issued_at).map(|t| (t, r)))
            .filter(|(t, _)| from.is_none_or(|f| *t >= f) && to.is_none_or(|e| *t <= e))
            .map(|(t, r)| (t, r.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.receipt_id.cmp(&b.1.receipt_id)));
        Ok(out.into_iter().map(|(_, r)| r).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use chrono::{Duration, TimeZone, Utc};
    use proptest::prelude::*;
    use serde_json::json;

    fn materials(session: &str, kind: DecisionKind, reason: &str) -> ReceiptMaterials {
        ReceiptMaterials {
            action: ReceiptAction {
                tool: "database".into(),
                operation: "execute".into(),
                parameters: json!({"query": "DROP DATABASE production", "password": "hunter2"})
                    .as_object()
                    .unwrap()
                    .clone(),
                timestamp: "2025-01-15T10:30:00.000Z".into(),
                seq: 1,
            },
            context: ReceiptContext {
                session_id: session.into(),
                context_snapshot_digest: "ab".repeat(32),
                data_classifications: BTreeSet::from(["PII".to_string()]),
                cumulative_drift: Some(0.25),
                deferred_count: 0,
            },
            identity: Identity {
                human_principal: "alice@company.com".into(),
                service_identity: "agent-svc@iam".into(),
                agent_identity: "agent-1".into(),
                session_id: session.into(),
                privilege_scope: vec!["db.admin".into()],
            },
            decision: ReceiptDecision {
                kind,
                matched_policies: vec!["block_drop_database".into()],
                reason: reason.into(),
                policy_set_digest: "cd".repeat(32),
                modified_parameters: None,
            },
            approval: None,
            deferral: None,
            outcome: Some(Outcome::new(OutcomeStatus::Blocked)),
        }
    }

    fn vault(seed: u8) -> (ReceiptVault, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::new(Utc.with_ymd_and_hms(2025, 1, 15, 10, 30, 0).unwrap()));
        let v = ReceiptVault::in_memory(
            Arc::new(Ed25519Signer::from_seed([seed; 32])),
            Arc::new(IdGen::seeded(1)),
            clock.clone(),
        );
        (v, clock)
    }

    #[test]
    fn issued_receipt_verifies() {
        let (v, _) = vault(1);
        let r = v.issue(materials("s", DecisionKind::Deny, "Forbidden: DROP DATABASE")).unwrap();
        assert_eq!(r.signature.algorithm, "Ed25519");
        assert_eq!(r.signature.key_id.len(), 8);
        assert_eq!(verify_receipt(&r, &v.public_keys()), Ok(()));
    }

    #[test]
    fn tampered_reason_fails() {
        let (v, _) = vault(1);
        let mut r = v.issue(materials("s", DecisionKind::Deny, "Forbidden: DROP DATABASE")).unwrap();
        r.decision.reason = "Forbidden: DROP DATABASF".into();
        assert_eq!(verify_receipt(&r, &v.public_keys()), Err(VerifyFailure::SignatureMismatch));
    }

    #[test]
    fn foreign_key_fails() {
        let (v, _) = vault(1);
        let (other, _) = vault(2);
        let r = v.issue(materials("s", DecisionKind::Deny, "x")).unwrap();
        assert!(matches!(verify_receipt(&r, &other.public_keys()), Err(VerifyFailure::UnknownKey(_))));
        let mut forged = r.clone();
        forged.signature.key_id = other.public_keys().to_json().as_object().unwrap().keys().next().unwrap().clone();
        assert_eq!(verify_receipt(&forged, &other.public_keys()), Err(VerifyFailure::SignatureMismatch));
    }

    #[test]
    fn key_id_is_prefix_of_public_key_digest() {
        let s = Ed25519Signer::from_seed([9; 32]);
        let pk = s.public_key();
        // Independent digest via the sha2 crate directly.
        use sha2::Digest;
        let d = sha2::Sha256::digest(pk);
        let hex: String = d.iter().take(4).map(|b| format!("{b:02x}")).collect();
        assert_eq!(s.key_id(), hex);
    }

    #[test]
    fn redaction_binds_value() {
        let (v, _) = vault(1);
        let v = v.with_redaction(["password".to_string()]);
        let r = v.issue(materials("s", DecisionKind::Deny, "x")).unwrap();
        let red = &r.action.parameters["password"];
        assert_eq!(red[REDACTED_KEY], json!(canonical::sha256_hex(b"\"hunter2\"")));
        assert_eq!(r.action.parameters["query"], json!("DROP DATABASE production"));
        assert!(verify_receipt(&r, &v.public_keys()).is_ok());
    }

    #[test]
    fn query_filters_and_orders() {
        let (v, clock) = vault(1);
        assert!(v.query(&ReceiptFilter::default()).unwrap().is_empty());
        let a = v.issue(materials("s1", DecisionKind::Defer, "wait")).unwrap();
        clock.advance(Duration::seconds(5));
        let b = v.issue(materials("s1", DecisionKind::Deny, "no")).unwrap();
        v.issue(materials("s2", DecisionKind::Allow, "ok")).unwrap();
        let s1 = v.query(&ReceiptFilter { session_id: Some("s1".into()), ..Default::default() }).unwrap();
        assert_eq!(s1.iter().map(|r| &r.receipt_id).collect::<Vec<_>>(), [&a.receipt_id, &b.receipt_id]);
        let defers = v
            .query(&ReceiptFilter { kinds: Some(vec![DecisionKind::Defer]), ..Default::default() })
            .unwrap();
        assert_eq!(defers, vec![a.clone()]);
        let bad = ReceiptFilter { from: Some("yesterday".into()), ..Default::default() };
        assert!(matches!(v.query(&bad), Err(ReceiptError::BadTimeRange(_))));
        let reversed = ReceiptFilter {
            from: Some("2025-01-16T00:00:00Z".into()),
            to: Some("2025-01-15T00:00:00Z".into()),
            ..Default::default()
        };
        assert!(matches!(v.query(&reversed), Err(ReceiptError::BadTimeRange(_))));
        let window = ReceiptFilter { from: Some("2025-01-15T10:30:01Z".into()), ..Default::default() };
        assert_eq!(v.query(&window).unwrap().len(), 2);
    }

    #[test]
    fn store_file_round_trips_and_verifies_offline() {
        let dir = tempfile::tempdir().unwrap();
        let signer = Arc::new(Ed25519Signer::from_seed([3; 32]));
        let clock = Arc::new(ManualClock::new(Utc.with_ymd_and_hms(2025, 1, 15, 10, 0, 0).unwrap()));
        let v = ReceiptVault::open(dir.path(), signer.clone(), Arc::new(IdGen::seeded(5)), clock.clone()).unwrap();
        for i in 0..5 {
            v.issue(materials(&format!("s{i}"), DecisionKind::Deny, "x")).unwrap();
        }
        let text = std::fs::read_to_string(dir.path().join(RECEIPTS_FILE)).unwrap();
        let keys = PublicKeys::load(&dir.path().join(KEYS_FILE)).unwrap();
        let verdicts = verify_receipts_text(&text, &keys);
        assert_eq!(verdicts.len(), 5);
        assert!(verdicts.iter().all(|v| v.result.is_ok()));
        drop(v);
        let reopened = ReceiptVault::open(dir.path(), signer, Arc::new(IdGen::seeded(6)), clock).unwrap();
        assert_eq!(reopened.len(), 5);
    }

    #[test]
    fn keys_json_round_trip_and_rotation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(KEYS_FILE);
        let mut a = PublicKeys::default();
        a.insert(Ed25519Signer::from_seed([1; 32]).public_key()).unwrap();
        a.publish(&path).unwrap();
        let mut b = PublicKeys::default();
        b.insert(Ed25519Signer::from_seed([2; 32]).public_key()).unwrap();
        b.publish(&path).unwrap();
        assert_eq!(PublicKeys::load(&path).unwrap().len(), 2);
        let bad = json!({"deadbeef": B64.encode(Ed25519Signer::from_seed([1; 32]).public_key())});
        assert!(PublicKeys::from_json(&bad).is_err());
    }

    #[test]
    fn seed_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("signing.key");
        let a = Ed25519Signer::load_or_create(&path).unwrap();
        let b = Ed25519Signer::load_or_create(&path).unwrap();
        assert_eq!(a.key_id(), b.key_id());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn any_byte_flip_is_detected(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
            let (v, _) = vault(4);
            let r = v.issue(materials("s", DecisionKind::Deny, "Forbidden: DROP DATABASE")).unwrap();
            let line = canonical::to_canonical_string(&r).unwrap();
            let mut bytes = line.into_bytes();
            let i = pos.index(bytes.len());
            bytes[i] ^= 1 << bit;
            let text = String::from_utf8_lossy(&bytes).into_owned();
            let verdicts = verify_receipts_text(&text, &v.public_keys());
            prop_assert!(verdicts.iter().any(|v| v.result.is_err()), "flip at {} undetected", i);
        }
    }
}
