//! Append-only, hash-chained evidence file.
//!
//! Line 1 is a header naming the format and hash function. Every following
//! line is one record whose `record_hash` commits to its sequence number,
//! kind, payload digest and the previous record's hash:
//!
//! ```text
//! record_hash = sha256(sequence_be64 ‖ len_be32(kind) ‖ kind ‖ payload_digest ‖ prev_hash)
//! ```
//!
//! Digests enter the hash as raw 32-byte values. Record 0 chains from 32
//! zero bytes. Sealing writes a `<ledger>.head` sidecar with the final head.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::client::ExchangeRecord;
use crate::digest::{decode_digest, sha256, HASH_ALGORITHM};
use crate::exec::Exec;
use crate::metrics::MetricReport;
use crate::parser::{ModelAnswer, TaskContext};
use crate::prompt::PromptRef;

pub const LEDGER_FORMAT: &str = "fairproof-ledger";
pub const LEDGER_VERSION: u32 = 1;
pub const GENESIS_HASH: [u8; 32] = [0; 32];

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ledger is sealed; no further appends")]
    Sealed,
    #[error("integrity breach: {0}")]
    Integrity(Breach),
    #[error("record {sequence} ({kind}): {message}")]
    Payload {
        sequence: u64,
        kind: RecordKind,
        message: String,
    },
    #[error("head file {path}: {message}")]
    Head { path: PathBuf, message: String },
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> LedgerError + '_ {
    move |source| LedgerError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Manifest,
    Template,
    Config,
    Exchange,
    Parse,
    Report,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Manifest => "manifest",
            RecordKind::Template => "template",
            RecordKind::Config => "config",
            RecordKind::Exchange => "exchange",
            RecordKind::Parse => "parse",
            RecordKind::Report => "report",
        }
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerHeader {
    pub format: String,
    pub version: u32,
    pub hash: String,
}

impl LedgerHeader {
    pub fn current() -> Self {
        LedgerHeader {
            format: LEDGER_FORMAT.to_owned(),
            version: LEDGER_VERSION,
            hash: HASH_ALGORITHM.to_owned(),
        }
    }

    fn line() -> String {
        serde_json::to_string(&Self::current()).expect("header serializes")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerRecord {
    pub sequence: u64,
    pub kind: RecordKind,
    /// Canonical compact JSON of the recorded object, embedded verbatim.
    pub payload: Box<RawValue>,
    pub payload_digest: String,
    pub prev_hash: String,
    pub record_hash: String,
}

impl LedgerRecord {
    pub fn payload_as<T: DeserializeOwned>(&self) -> Result<T, LedgerError> {
        serde_json::from_str(self.payload.get()).map_err(|e| LedgerError::Payload {
            sequence: self.sequence,
            kind: self.kind,
            message: e.to_string(),
        })
    }
}

pub fn record_hash(sequence: u64, kind: RecordKind, payload_digest: &[u8; 32], prev_hash: &[u8; 32]) -> [u8; 32] {
    let kind = kind.as_str().as_bytes();
    let mut buf = Vec::with_capacity(8 + 4 + kind.len() + 64);
    buf.extend_from_slice(&sequence.to_be_bytes());
    buf.extend_from_slice(&(kind.len() as u32).to_be_bytes());
    buf.extend_from_slice(kind);
    buf.extend_from_slice(payload_digest);
    buf.extend_from_slice(prev_hash);
    sha256(&buf)
}

/// Payload of a `parse` record: the answer plus everything needed to
/// re-derive it from the referenced exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParseRecord {
    pub exchange_sequence: u64,
    pub prompt_ref: PromptRef,
    pub context: TaskContext,
    pub answer: ModelAnswer,
}

/// Pins a ledger: its run id, record count and final hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerHead {
    pub run_id: String,
    pub length: u64,
    pub head_hash: String,
}

pub fn head_path(ledger: &Path) -> PathBuf {
    let mut name = ledger.as_os_str().to_owned();
    name.push(".head");
    PathBuf::from(name)
}

/// Chain state shared by the file writer and the in-memory encoder.
#[derive(Debug, Clone)]
struct Chain {
    next: u64,
    head: [u8; 32],
    first: Option<[u8; 32]>,
}

impl Chain {
    fn new() -> Self {
        Chain { next: 0, head: GENESIS_HASH, first: None }
    }

    fn link(&mut self, kind: RecordKind, payload: String) -> (LedgerRecord, String) {
        let digest = sha256(payload.as_bytes());
        let hash = record_hash(self.next, kind, &digest, &self.head);
        let record = LedgerRecord {
            sequence: self.next,
            kind,
            payload: RawValue::from_string(payload).expect("payload is JSON"),
            payload_digest: hex::encode(digest),
            prev_hash: hex::encode(self.head),
            record_hash: hex::encode(hash),
        };
        let mut line = serde_json::to_string(&record).expect("records serialize");
        line.push('\n');
        self.next += 1;
        self.head = hash;
        self.first.get_or_insert(hash);
        (record, line)
    }

    fn head_record(&self) -> LedgerHead {
        LedgerHead {
            run_id: run_id(self.first.as_ref()),
            length: self.next,
            head_hash: hex::encode(self.head),
        }
    }
}

fn run_id(first: Option<&[u8; 32]>) -> String {
    first.map(|h| hex::encode(&h[..8])).unwrap_or_default()
}

fn canonical_payload<T: Serialize + ?Sized>(value: &T) -> String {
    serde_json::to_string(value).expect("payloads serialize")
}

/// Builds a complete ledger in memory from (kind, canonical payload) pairs.
pub fn encode_ledger<'a>(entries: impl IntoIterator<Item = (RecordKind, &'a str)>) -> Vec<u8> {
    let mut out = LedgerHeader::line().into_bytes();
    out.push(b'\n');
    let mut chain = Chain::new();
    for (kind, payload) in entries {
        out.extend_from_slice(chain.link(kind, payload.to_owned()).1.as_bytes());
    }
    out
}

/// Single-writer ledger file. Every append is flushed to disk before it
/// returns.
pub struct LedgerWriter {
    path: PathBuf,
    file: File,
    chain: Chain,
    sealed: bool,
}

impl LedgerWriter {
    /// Creates a new ledger; an existing file is never overwritten.
    pub fn create(path: &Path) -> Result<Self, LedgerError> {
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(io_error(path))?;
        let mut header = LedgerHeader::line();
        header.push('\n');
        file.write_all(header.as_bytes()).map_err(io_error(path))?;
        file.sync_data().map_err(io_error(path))?;
        Ok(LedgerWriter { path: path.to_path_buf(), file, chain: Chain::new(), sealed: false })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> u64 {
        self.chain.next
    }

    pub fn is_empty(&self) -> bool {
        self.chain.next == 0
    }

    /// Hash of the last appended record (all zeros before the first).
    pub fn head_hash(&self) -> String {
        hex::encode(self.chain.head)
    }

    pub fn append<T: Serialize + ?Sized>(&mut self, kind: RecordKind, payload: &T) -> Result<LedgerRecord, LedgerError> {
        self.append_canonical(kind, canonical_payload(payload))
    }

    /// Appends an already canonical JSON payload.
    pub fn append_canonical(&mut self, kind: RecordKind, payload: String) -> Result<LedgerRecord, LedgerError> {
        if self.sealed {
            return Err(LedgerError::Sealed);
        }
        let mut next = self.chain.clone();
        let (record, line) = next.link(kind, payload);
        self.file.write_all(line.as_bytes()).map_err(io_error(&self.path))?;
        self.file.sync_data().map_err(io_error(&self.path))?;
        self.chain = next;
        Ok(record)
    }

    /// Closes the ledger for writing and writes the head sidecar.
    pub fn seal(&mut self) -> Result<LedgerHead, LedgerError> {
        if self.sealed {
            return Err(LedgerError::Sealed);
        }
        let head = self.chain.head_record();
        let path = head_path(&self.path);
        let mut text = serde_json::to_string_pretty(&head).expect("head serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(io_error(&path))?;
        self.sealed = true;
        Ok(head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BreachKind {
    Header,
    Malformed,
    NonCanonical,
    Sequence,
    PayloadDigest,
    RecordHash,
    ChainLink,
    Truncated,
    LengthMismatch,
    HeadMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Breach {
    /// Index of the first record that fails; header problems report 0.
    pub index: u64,
    pub kind: BreachKind,
    pub detail: String,
}

impl fmt::Display for Breach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "record {}: {:?}: {}", self.index, self.kind, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verification {
    /// Number of records that verified before the first breach.
    pub verified: u64,
    /// Hash of the last verified record.
    pub head_hash: String,
    pub run_id: String,
    pub breach: Option<Breach>,
}

impl Verification {
    pub fn is_clean(&self) -> bool {
        self.breach.is_none()
    }
}

fn breach(index: u64, kind: BreachKind, detail: impl Into<String>) -> Breach {
    Breach { index, kind, detail: detail.into() }
}

/// (prev_hash, record_hash) of a line that checked out.
type LineCheck = Result<([u8; 32], [u8; 32]), Breach>;

/// Checks one record line in isolation and returns (prev_hash, record_hash).
fn check_line(index: u64, line: &[u8]) -> LineCheck {
    let text = std::str::from_utf8(line).map_err(|_| breach(index, BreachKind::Malformed, "not UTF-8"))?;
    let record: LedgerRecord =
        serde_json::from_str(text).map_err(|e| breach(index, BreachKind::Malformed, e.to_string()))?;
    if serde_json::to_string(&record).ok().as_deref() != Some(text) {
        return Err(breach(index, BreachKind::NonCanonical, "record is not in canonical form"));
    }
    let payload: serde_json::Value = serde_json::from_str(record.payload.get())
        .map_err(|e| breach(index, BreachKind::Malformed, e.to_string()))?;
    if serde_json::to_string(&payload).ok().as_deref() != Some(record.payload.get()) {
        return Err(breach(index, BreachKind::NonCanonical, "payload is not in canonical form"));
    }
    if record.sequence != index {
        return Err(breach(index, BreachKind::Sequence, format!("sequence {} at position {index}", record.sequence)));
    }
    let digest = |s: &str, what: &str| {
        decode_digest(s).ok_or_else(|| breach(index, BreachKind::Malformed, format!("{what} is not a lowercase hex digest")))
    };
    let payload_digest = digest(&record.payload_digest, "payload_digest")?;
    let prev = digest(&record.prev_hash, "prev_hash")?;
    let stored = digest(&record.record_hash, "record_hash")?;
    if sha256(record.payload.get().as_bytes()) != payload_digest {
        return Err(breach(index, BreachKind::PayloadDigest, "payload does not match payload_digest"));
    }
    if record_hash(index, record.kind, &payload_digest, &prev) != stored {
        return Err(breach(index, BreachKind::RecordHash, "record_hash does not recompute"));
    }
    Ok((prev, stored))
}

/// Verifies ledger bytes: header, every record and every chain link. Record
/// hashes are recomputed under `exec`; the chain walk is sequential.
pub fn verify_bytes(bytes: &[u8], exec: Exec) -> Verification {
    let mut result = Verification {
        verified: 0,
        head_hash: hex::encode(GENESIS_HASH),
        run_id: String::new(),
        breach: None,
    };
    let Some(header_end) = bytes.iter().position(|&b| b == b'\n') else {
        result.breach = Some(breach(0, BreachKind::Header, "missing header line"));
        return result;
    };
    let header_ok = std::str::from_utf8(&bytes[..header_end])
        .ok()
        .filter(|h| *h == LedgerHeader::line())
        .is_some();
    if !header_ok {
        result.breach = Some(breach(0, BreachKind::Header, "unrecognized header"));
        return result;
    }

    let body = &bytes[header_end + 1..];
    let mut lines: Vec<&[u8]> = body.split(|&b| b == b'\n').collect();
    // `split` yields a final empty slice when the body ends with a newline.
    let partial = lines.pop().filter(|last| !last.is_empty());

    // Sequential checking is lazy and stops at the first bad line.
    let checked: Box<dyn Iterator<Item = LineCheck>> = if exec.is_parallel() {
        Box::new(exec.map_range(lines.len(), |i| check_line(i as u64, lines[i])).into_iter())
    } else {
        Box::new(lines.iter().enumerate().map(|(i, line)| check_line(i as u64, line)))
    };
    let mut head = GENESIS_HASH;
    for (i, outcome) in checked.enumerate() {
        let i = i as u64;
        let (prev, hash) = match outcome {
            Ok(v) => v,
            Err(b) => {
                result.breach = Some(b);
                return result;
            }
        };
        if prev != head {
            result.breach = Some(breach(i, BreachKind::ChainLink, "prev_hash does not match the preceding record"));
            return result;
        }
        if i == 0 {
            result.run_id = run_id(Some(&hash));
        }
        head = hash;
        result.verified = i + 1;
        result.head_hash = hex::encode(head);
    }
    if partial.is_some() {
        result.breach = Some(breach(result.verified, BreachKind::Truncated, "final record is not newline-terminated"));
    }
    result
}

/// Verifies a ledger file and, when present, its head sidecar.
pub fn verify_file(path: &Path, exec: Exec) -> Result<Verification, LedgerError> {
    let bytes = std::fs::read(path).map_err(io_error(path))?;
    let mut result = verify_bytes(&bytes, exec);
    if result.breach.is_some() {
        return Ok(result);
    }
    let sidecar = head_path(path);
    let text = match std::fs::read_to_string(&sidecar) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(result),
        Err(source) => return Err(LedgerError::Io { path: sidecar, source }),
    };
    let head: LedgerHead = serde_json::from_str(&text).map_err(|e| LedgerError::Head {
        path: sidecar.clone(),
        message: e.to_string(),
    })?;
    if head.length != result.verified {
        let at = head.length.min(result.verified);
        result.breach = Some(breach(
            at,
            BreachKind::LengthMismatch,
            format!("head file records {} entries, ledger holds {}", head.length, result.verified),
        ));
    } else if head.head_hash != result.head_hash || head.run_id != result.run_id {
        result.breach = Some(breach(
            result.verified.saturating_sub(1),
            BreachKind::HeadMismatch,
            "head file does not match the final record",
        ));
    }
    Ok(result)
}

/// Parses every record of ledger bytes that verify clean.
pub fn decode_records(bytes: &[u8], exec: Exec) -> Result<Vec<LedgerRecord>, LedgerError> {
    let v = verify_bytes(bytes, exec);
    if let Some(b) = v.breach {
        return Err(LedgerError::Integrity(b));
    }
    let text = std::str::from_utf8(bytes).expect("verified ledgers are UTF-8");
    Ok(text
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).expect("verified records parse"))
        .collect())
}

/// Reads a ledger file, failing on any breach including a sidecar mismatch.
pub fn read_ledger(path: &Path, exec: Exec) -> Result<Vec<LedgerRecord>, LedgerError> {
    let v = verify_file(path, exec)?;
    if let Some(b) = v.breach {
        return Err(LedgerError::Integrity(b));
    }
    let bytes = std::fs::read(path).map_err(io_error(path))?;
    decode_records(&bytes, exec)
}

/// Rewrites a ledger with every wall-clock field zeroed and re-chains it.
/// The stored report's `ledger_head` is updated to the new chain.
pub fn normalize_time(bytes: &[u8], exec: Exec) -> Result<Vec<u8>, LedgerError> {
    let records = decode_records(bytes, exec)?;
    let mut out = LedgerHeader::line().into_bytes();
    out.push(b'\n');
    let mut chain = Chain::new();
    for record in records {
        let payload = match record.kind {
            RecordKind::Exchange => {
                let mut exchange: ExchangeRecord = record.payload_as()?;
                exchange.normalize_time();
                canonical_payload(&exchange)
            }
            RecordKind::Report => {
                let mut report: MetricReport = record.payload_as()?;
                report.provenance.ledger_head = hex::encode(chain.head);
                report.to_canonical()
            }
            _ => record.payload.get().to_owned(),
        };
        out.extend_from_slice(chain.link(record.kind, payload).1.as_bytes());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize) -> Vec<u8> {
        let payloads: Vec<String> = (0..n).map(|i| format!(r#"{{"i":{i},"s":"x{i}"}}"#)).collect();
        encode_ledger(payloads.iter().map(|p| (RecordKind::Manifest, p.as_str())))
    }

    #[test]
    fn genesis_and_chain_law() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.jsonl");
        let mut w = LedgerWriter::create(&path).unwrap();
        let r0 = w.append(RecordKind::Config, &serde_json::json!({"a": 1})).unwrap();
        let r1 = w.append(RecordKind::Parse, &serde_json::json!({"b": [1, 2]})).unwrap();
        assert_eq!(r0.sequence, 0);
        assert_eq!(r0.prev_hash, "0".repeat(64));
        assert_eq!(r1.prev_hash, r0.record_hash);
        let head = w.seal().unwrap();
        assert_eq!(head.length, 2);
        assert_eq!(head.head_hash, r1.record_hash);
        assert!(matches!(w.append(RecordKind::Report, &1), Err(LedgerError::Sealed)));

        let v = verify_file(&path, Exec::default()).unwrap();
        assert!(v.is_clean(), "{v:?}");
        assert_eq!(v.head_hash, head.head_hash);
        assert_eq!(v.run_id, head.run_id);
        assert!(LedgerWriter::create(&path).is_err());
    }

    #[test]
    fn writer_matches_in_memory_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.jsonl");
        let mut w = LedgerWriter::create(&path).unwrap();
        for i in 0..3 {
            w.append_canonical(RecordKind::Manifest, format!(r#"{{"i":{i},"s":"x{i}"}}"#)).unwrap();
        }
        assert_eq!(std::fs::read(&path).unwrap(), sample(3));
    }

    #[test]
    fn every_prefix_at_a_record_boundary_verifies() {
        let bytes = sample(6);
        let mut boundaries = 0;
        for cut in 0..=bytes.len() {
            let v = verify_bytes(&bytes[..cut], Exec::Sequential);
            if cut > 0 && bytes[cut - 1] == b'\n' {
                boundaries += 1;
                assert!(v.is_clean(), "cut {cut}: {v:?}");
            } else {
                assert!(!v.is_clean(), "cut {cut} passed");
            }
        }
        assert_eq!(boundaries, 7);
    }

    #[test]
    fn sidecar_detects_boundary_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.jsonl");
        let mut w = LedgerWriter::create(&path).unwrap();
        for i in 0..4 {
            w.append(RecordKind::Exchange, &i).unwrap();
        }
        w.seal().unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = bytes[..bytes.len() - 1].iter().rposition(|&b| b == b'\n').unwrap() + 1;
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let v = verify_file(&path, Exec::default()).unwrap();
        assert_eq!(v.breach.unwrap().kind, BreachKind::LengthMismatch);
    }

    #[test]
    fn non_canonical_payload_is_a_breach() {
        let good = String::from_utf8(sample(2)).unwrap();
        let spaced = good.replacen(r#"{"i":1,"#, r#"{"i": 1,"#, 1);
        let v = verify_bytes(spaced.as_bytes(), Exec::Sequential);
        assert_eq!(v.breach.unwrap().index, 1);
    }

    #[test]
    fn strategies_agree_on_every_mutation() {
        let bytes = sample(5);
        for i in (0..bytes.len()).step_by(7) {
            let mut m = bytes.clone();
            m[i] ^= 0x20;
            assert_eq!(verify_bytes(&m, Exec::Sequential), verify_bytes(&m, Exec::Parallel));
        }
    }

    #[test]
    fn empty_ledger_is_clean_with_zero_head() {
        let v = verify_bytes(&encode_ledger([]), Exec::default());
        assert!(v.is_clean());
        assert_eq!(v.verified, 0);
        assert_eq!(v.head_hash, "0".repeat(64));
    }
}
