//! Per-session append-only, hash-chained context log.
//!
//! On disk each session is one file, `<session_id>.ctx.jsonl`: line 1 is
//! the canonical [`SessionInit`], every following line one canonical
//! [`ContextEntry`]. Entry `n` carries the hash of entry `n-1` (entry 1
//! carries the digest of the init record), so the original request is
//! anchored in the chain as well.

use crate::canonical::{self, CanonicalError};
use crate::classify::{extract_entities, ClassificationRules, DataSource};
use crate::model::{Action, Identity};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LedgerError {
    #[error("session {0:?} already exists")]
    SessionExists(String),
    #[error("no session {0:?}")]
    NoSession(String),
    #[error("invalid session record: {0}")]
    Validation(String),
    #[error("ordering violation: expected seq {expected}, got {got}")]
    Ordering { expected: u64, got: u64 },
    #[error("signals would break a ledger invariant: {0}")]
    InvalidSignals(String),
    #[error("original request already recorded for session {0:?}")]
    IntentAlreadySet(String),
    #[error("ledger storage error: {0}")]
    Io(String),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
}

impl From<std::io::Error> for LedgerError {
    fn from(e: std::io::Error) -> Self {
        LedgerError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionInit {
    pub schema_version: u32,
    pub session_id: String,
    pub original_request: Option<String>,
    pub identity: Identity,
    pub created_at: String,
    /// SHA-256 of the canonical bytes of the active policy set.
    pub config_snapshot_digest: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DerivedSignals {
    /// Cumulative over the session.
    pub data_classifications: BTreeSet<String>,
    pub semantic_distance: Option<f64>,
    /// Running maximum of semantic distance; 0 without a baseline.
    pub cumulative_drift: f64,
    pub scope_expansion: bool,
    /// Cumulative over the session.
    pub entities: BTreeSet<String>,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    /// An executed action with its output.
    Action,
    /// The original request supplied after session start.
    Intent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextEntry {
    pub schema_version: u32,
    pub kind: EntryKind,
    pub session_id: String,
    pub seq: u64,
    pub action: Option<Action>,
    pub output: Option<Value>,
    pub signals: Option<DerivedSignals>,
    pub original_request: Option<String>,
    pub prev_hash: String,
    pub entry_hash: String,
}

impl ContextEntry {
    /// SHA-256 over the canonical bytes of the entry without `entry_hash`.
    pub fn compute_hash(&self) -> Result<String, CanonicalError> {
        Ok(hash_without_entry_hash(canonical::to_value(self)?))
    }
}

fn hash_without_entry_hash(mut v: Value) -> String {
    if let Value::Object(map) = &mut v {
        map.shift_remove("entry_hash");
    }
    canonical::sha256_hex(canonical::value_to_canonical_string(&v).as_bytes())
}

/// One executed action as seen by policy evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryItem {
    pub seq: u64,
    pub action_seq: u64,
    pub tool: String,
    pub operation: String,
    pub parameters_digest: String,
}

/// Accumulated session context handed to policy evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextSnapshot {
    pub session_id: String,
    pub original_request: Option<String>,
    pub history: im::Vector<HistoryItem>,
    pub data_classifications: BTreeSet<String>,
    pub entities: BTreeSet<String>,
    /// Both `tool` and `tool.operation` for every executed action.
    pub prior_tools: BTreeSet<String>,
    pub cumulative_drift: Option<f64>,
    pub confidence: f64,
    pub deferred_count: usize,
    /// Seq of the latest ledger entry (0 before the first).
    pub ledger_seq: u64,
    /// Hash of the latest ledger entry, or the init digest.
    pub head_hash: String,
}

#[derive(Serialize)]
struct SnapshotCommitment<'a> {
    session_id: &'a str,
    original_request: &'a Option<String>,
    history_len: usize,
    data_classifications: &'a BTreeSet<String>,
    entities: &'a BTreeSet<String>,
    prior_tools: &'a BTreeSet<String>,
    cumulative_drift: Option<f64>,
    confidence: f64,
    deferred_count: usize,
    ledger_seq: u64,
    head_hash: &'a str,
}

impl ContextSnapshot {
    fn empty(session_id: &str, original_request: Option<String>, head_hash: String) -> Self {
        ContextSnapshot {
            session_id: session_id.to_owned(),
            original_request,
            history: im::Vector::new(),
            data_classifications: BTreeSet::new(),
            entities: BTreeSet::new(),
            prior_tools: BTreeSet::new(),
            cumulative_drift: None,
            confidence: 0.0,
            deferred_count: 0,
            ledger_seq: 0,
            head_hash,
        }
    }

    /// Digest binding this snapshot. The history enters through
    /// `head_hash`, which commits to every prior entry via the chain.
    pub fn digest(&self) -> String {
        let c = SnapshotCommitment {
            session_id: &self.session_id,
            original_request: &self.original_request,
            history_len: self.history.len(),
            data_classifications: &self.data_classifications,
            entities: &self.entities,
            prior_tools: &self.prior_tools,
            cumulative_drift: self.cumulative_drift,
            confidence: self.confidence,
            deferred_count: self.deferred_count,
            ledger_seq: self.ledger_seq,
            head_hash: &self.head_hash,
        };
        canonical::canonical_digest(&c).expect("snapshot values are finite")
    }

    /// Overlay drift observed for the action under evaluation.
    pub fn with_drift(mut self, cumulative_drift: Option<f64>) -> Self {
        self.cumulative_drift = cumulative_drift;
        self.confidence = cumulative_drift.map(|d| 1.0 - d).unwrap_or(0.0);
        self
    }
}

/// Inputs for computing the δ signals of a new entry.
pub struct SignalInputs<'a> {
    pub previous: &'a ContextSnapshot,
    pub action: &'a Action,
    pub output: Option<&'a Value>,
    pub semantic_distance: Option<f64>,
    pub cumulative_drift: Option<f64>,
    pub drift_threshold: f64,
    pub rules: &'a ClassificationRules,
}

/// Cumulative signals for an entry appended after `previous`.
pub fn derive_signals(inputs: SignalInputs<'_>) -> DerivedSignals {
    let SignalInputs { previous, action, output, semantic_distance, cumulative_drift, drift_threshold, rules } =
        inputs;
    let mut classes = previous.data_classifications.clone();
    classes.extend(rules.classify(DataSource::Request(action)));
    let mut entities = previous.entities.clone();
    extract_entities(&Value::Object(action.parameters.clone()), &mut entities);
    if let Some(output) = output {
        classes.extend(rules.classify(DataSource::Output { action, output }));
        extract_entities(output, &mut entities);
    }
    let drift = cumulative_drift.unwrap_or(0.0).max(previous.cumulative_drift.unwrap_or(0.0));
    DerivedSignals {
        data_classifications: classes,
        semantic_distance,
        cumulative_drift: drift,
        scope_expansion: !previous.prior_tools.contains(&action.tool) && drift > drift_threshold,
        entities,
        confidence: if semantic_distance.is_some() { 1.0 - drift } else { 0.0 },
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainStatus {
    Ok { entries: u64 },
    /// Smallest seq at which the chain breaks; 0 is the init record.
    Corrupt { seq: u64, reason: String },
}

impl ChainStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, ChainStatus::Ok { .. })
    }
}

struct SessionLog {
    init: SessionInit,
    genesis_digest: String,
    entries: Vec<ContextEntry>,
    action_seqs: HashSet<u64>,
    snapshot: ContextSnapshot,
    file: Option<File>,
    path: Option<PathBuf>,
}

/// The context store. Per-session appends are serialized by a per-session
/// lock; different sessions never contend.
pub struct ContextLedger {
    dir: Option<PathBuf>,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionLog>>>>,
}

pub fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
}

pub fn ledger_file_name(session_id: &str) -> String {
    format!("{session_id}.ctx.jsonl")
}

impl ContextLedger {
    /// Ledger kept only in memory.
    pub fn in_memory() -> Self {
        ContextLedger { dir: None, sessions: RwLock::new(HashMap::new()) }
    }

    /// Ledger persisted under `dir` (created if missing).
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, LedgerError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(ContextLedger { dir: Some(dir), sessions: RwLock::new(HashMap::new()) })
    }

    pub fn path_for(&self, session_id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(ledger_file_name(session_id)))
    }

    fn session(&self, session_id: &str) -> Result<Arc<Mutex<SessionLog>>, LedgerError> {
        self.sessions
            .read()
            .get(session_id)
            .cloned()
            .ok_or_else(|| LedgerError::NoSession(session_id.to_owned()))
    }

    pub fn contains(&self, session_id: &str) -> bool {
        self.sessions.read().contains_key(session_id)
    }

    /// Persist the genesis record; returns its digest.
    pub fn init_session(&self, init: SessionInit) -> Result<String, LedgerError> {
        if !valid_session_id(&init.session_id) {
            return Err(LedgerError::Validation(format!(
                "session_id {:?} must be 1-128 chars of [A-Za-z0-9_.-]",
                init.session_id
            )));
        }
        if crate::model::parse_utc(&init.created_at).is_none() {
            return Err(LedgerError::Validation("created_at is not RFC 3339 UTC".into()));
        }
        if init.original_request.as_deref().is_some_and(|r| r.trim().is_empty()) {
            return Err(LedgerError::Validation("original_request must be non-empty when present".into()));
        }
        let mut sessions = self.sessions.write();
        if sessions.contains_key(&init.session_id) {
            return Err(LedgerError::SessionExists(init.session_id));
        }
        let line = canonical::to_canonical_string(&init)?;
        let genesis_digest = canonical::sha256_hex(line.as_bytes());
        let path = self.path_for(&init.session_id);
        let file = match &path {
            Some(p) => {
                let mut f = OpenOptions::new().write(true).create_new(true).open(p).map_err(|e| {
                    if e.kind() == std::io::ErrorKind::AlreadyExists {
                        LedgerError::SessionExists(init.session_id.clone())
                    } else {
                        e.into()
                    }
                })?;
                f.write_all(format!("{line}\n").as_bytes())?;
                Some(f)
            }
            None => None,
        };
        let snapshot =
            ContextSnapshot::empty(&init.session_id, init.original_request.clone(), genesis_digest.clone());
        sessions.insert(
            init.session_id.clone(),
            Arc::new(Mutex::new(SessionLog {
                init,
                genesis_digest: genesis_digest.clone(),
                entries: Vec::new(),
                action_seqs: HashSet::new(),
                snapshot,
                file,
                path,
            })),
        );
        Ok(genesis_digest)
    }

    pub fn genesis(&self, session_id: &str) -> Result<(SessionInit, String), LedgerError> {
        let s = self.session(session_id)?;
        let log = s.lock();
        Ok((log.init.clone(), log.genesis_digest.clone()))
    }

    /// Seq of the latest entry, 0 if none.
    pub fn last_seq(&self, session_id: &str) -> Result<u64, LedgerError> {
        Ok(self.session(session_id)?.lock().entries.len() as u64)
    }

    /// Append an executed action. `seq` must be exactly one past the
    /// latest entry.
    pub fn append_entry(
        &self,
        session_id: &str,
        seq: u64,
        action: Action,
        output: Option<Value>,
        signals: DerivedSignals,
    ) -> Result<ContextEntry, LedgerError> {
        let s = self.session(session_id)?;
        let mut log = s.lock();
        let expected = log.entries.len() as u64 + 1;
        if seq != expected {
            return Err(LedgerError::Ordering { expected, got: seq });
        }
        if action.session_id() != session_id {
            return Err(LedgerError::Validation("action belongs to another session".into()));
        }
        if log.action_seqs.contains(&action.seq) {
            return Err(LedgerError::Ordering { expected, got: action.seq });
        }
        let prev_signals = log.entries.iter().rev().find_map(|e| e.signals.as_ref());
        if let Some(prev) = prev_signals {
            if signals.cumulative_drift < prev.cumulative_drift {
                return Err(LedgerError::InvalidSignals("cumulative_drift decreased".into()));
            }
            if !signals.data_classifications.is_superset(&prev.data_classifications) {
                return Err(LedgerError::InvalidSignals("classification set shrank".into()));
            }
        }
        for x in [signals.cumulative_drift, signals.confidence]
            .into_iter()
            .chain(signals.semantic_distance)
        {
            if !(0.0..=1.0).contains(&x) {
                return Err(LedgerError::InvalidSignals(format!("{x} outside [0, 1]")));
            }
        }
        let entry = ContextEntry {
            schema_version: SCHEMA_VERSION,
            kind: EntryKind::Action,
            session_id: session_id.to_owned(),
            seq,
            action: Some(action),
            output,
            signals: Some(signals),
            original_request: None,
            prev_hash: log.snapshot.head_hash.clone(),
            entry_hash: String::new(),
        };
        commit(&mut log, entry)
    }

    /// Record an original request for a session started without one.
    pub fn append_intent(&self, session_id: &str, original_request: &str) -> Result<ContextEntry, LedgerError> {
        if original_request.trim().is_empty() {
            return Err(LedgerError::Validation("original_request must be non-empty".into()));
        }
        let s = self.session(session_id)?;
        let mut log = s.lock();
        if log.snapshot.original_request.is_some() {
            return Err(LedgerError::IntentAlreadySet(session_id.to_owned()));
        }
        let entry = ContextEntry {
            schema_version: SCHEMA_VERSION,
            kind: EntryKind::Intent,
            session_id: session_id.to_owned(),
            seq: log.entries.len() as u64 + 1,
            action: None,
            output: None,
            signals: None,
            original_request: Some(original_request.to_owned()),
            prev_hash: log.snapshot.head_hash.clone(),
            entry_hash: String::new(),
        };
        commit(&mut log, entry)
    }

    pub fn current_context(&self, session_id: &str) -> Result<ContextSnapshot, LedgerError> {
        Ok(self.session(session_id)?.lock().snapshot.clone())
    }

    pub fn entries(&self, session_id: &str) -> Result<Vec<ContextEntry>, LedgerError> {
        Ok(self.session(session_id)?.lock().entries.clone())
    }

    /// Recompute every hash and link from storage (the session file when
    /// persisted, memory otherwise).
    pub fn verify_chain(&self, session_id: &str) -> ChainStatus {
        if let Some(path) = self.path_for(session_id) {
            if path.exists() || self.contains(session_id) {
                return verify_file(&path);
            }
        }
        let Ok(s) = self.session(session_id) else {
            return ChainStatus::Corrupt { seq: 0, reason: "no such session".into() };
        };
        let log = s.lock();
        let mut lines = Vec::with_capacity(log.entries.len() + 1);
        match canonical::to_canonical_string(&log.init) {
            Ok(l) => lines.push(l),
            Err(e) => return ChainStatus::Corrupt { seq: 0, reason: e.to_string() },
        }
        for e in &log.entries {
            match canonical::to_canonical_string(e) {
                Ok(l) => lines.push(l),
                Err(err) => return ChainStatus::Corrupt { seq: e.seq, reason: err.to_string() },
            }
        }
        let mut text = lines.join("\n");
        text.push('\n');
        verify_bytes(text.as_bytes())
    }
}

fn commit(log: &mut SessionLog, mut entry: ContextEntry) -> Result<ContextEntry, LedgerError> {
    entry.entry_hash = entry.compute_hash()?;
    let line = canonical::to_canonical_string(&entry)?;
    if let Some(f) = log.file.as_mut() {
        f.write_all(format!("{line}\n").as_bytes())?;
    } else if let Some(p) = &log.path {
        return Err(LedgerError::Io(format!("{} is not open", p.display())));
    }
    apply_to_snapshot(&mut log.snapshot, &entry);
    if let Some(a) = &entry.action {
        log.action_seqs.insert(a.seq);
    }
    log.entries.push(entry.clone());
    Ok(entry)
}

fn apply_to_snapshot(snap: &mut ContextSnapshot, entry: &ContextEntry) {
    snap.ledger_seq = entry.seq;
    snap.head_hash = entry.entry_hash.clone();
    if let Some(req) = &entry.original_request {
        snap.original_request = Some(req.clone());
    }
    if let Some(action) = &entry.action {
        let parameters_digest =
            canonical::canonical_digest(&action.parameters).expect("JSON parameters are finite");
        // Persistent vector: snapshots held by evaluations share structure.
        snap.history.push_back(HistoryItem {
            seq: entry.seq,
            action_seq: action.seq,
            tool: action.tool.clone(),
            operation: action.operation.clone(),
            parameters_digest,
        });
        snap.prior_tools.insert(action.tool.clone());
        snap.prior_tools.insert(action.qualified_name());
    }
    if let Some(sig) = &entry.signals {
        snap.data_classifications.extend(sig.data_classifications.iter().cloned());
        snap.entities.extend(sig.entities.iter().cloned());
        if sig.semantic_distance.is_some() || snap.cumulative_drift.is_some() {
            let d = snap.cumulative_drift.unwrap_or(0.0).max(sig.cumulative_drift);
            snap.cumulative_drift = Some(d);
            snap.confidence = sig.confidence;
        }
    }
}

/// Verify a ledger file without any in-memory state.
pub fn verify_file(path: &Path) -> ChainStatus {
    match std::fs::read(path) {
        Ok(bytes) => verify_bytes(&bytes),
        Err(e) => ChainStatus::Corrupt { seq: 0, reason: format!("unreadable: {e}") },
    }
}

/// Verify ledger bytes: every line canonical, init first, seqs contiguous,
/// every link and entry hash intact, newline-terminated.
pub fn verify_bytes(bytes: &[u8]) -> ChainStatus {
    let corrupt = |seq: usize, reason: &str| ChainStatus::Corrupt { seq: seq as u64, reason: reason.to_owned() };
    if bytes.is_empty() {
        return corrupt(0, "empty ledger");
    }
    let body = match bytes.strip_suffix(b"\n") {
        Some(b) => b,
        None => {
            let last = bytes.split(|b| *b == b'\n').count() - 1;
            return corrupt(last, "missing trailing newline");
        }
    };
    let mut prev_hash = String::new();
    let mut count = 0u64;
    for (i, raw) in body.split(|b| *b == b'\n').enumerate() {
        let Ok(line) = std::str::from_utf8(raw) else {
            return corrupt(i, "invalid UTF-8");
        };
        let Ok(value) = serde_json::from_str::<Value>(line) else {
            return corrupt(i, "unparseable record");
        };
        if canonical::value_to_canonical_string(&value) != line {
            return corrupt(i, "non-canonical encoding");
        }
        if i == 0 {
            if serde_json::from_value::<SessionInit>(value).is_err() {
                return corrupt(0, "malformed init record");
            }
            prev_hash = canonical::sha256_hex(raw);
            continue;
        }
        // Hash the stored record itself, not a re-serialization of it.
        let stored_hash = hash_without_entry_hash(value.clone());
        let Ok(entry) = serde_json::from_value::<ContextEntry>(value) else {
            return corrupt(i, "malformed entry");
        };
        if entry.prev_hash != prev_hash {
            // A removed predecessor shows up as a broken link on the
            // entry that followed it.
            let seq = entry.seq.clamp(i as u64, i as u64 + 1);
            return ChainStatus::Corrupt { seq, reason: "prev_hash does not match predecessor".into() };
        }
        if stored_hash != entry.entry_hash {
            return corrupt(i, "entry_hash mismatch");
        }
        if entry.seq != i as u64 {
            return corrupt(i, "seq out of order");
        }
        prev_hash = entry.entry_hash;
        count += 1;
    }
    ChainStatus::Ok { entries: count }
}
