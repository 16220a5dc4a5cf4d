use std::io::{BufRead, Write};
use std::marker::PhantomData;

use serde::{Deserialize, Serialize};

use super::PrivacyError;
use crate::numerics::{Matrix, Scalar};
use crate::recommender::{ImpressionEvent, UserTagSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    RawEvents,
    UserTags,
    ModelParams,
    EncryptedBlob,
}

impl std::fmt::Display for MessageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MessageKind::RawEvents => "RAW_EVENTS",
            MessageKind::UserTags => "USER_TAGS",
            MessageKind::ModelParams => "MODEL_PARAMS",
            MessageKind::EncryptedBlob => "ENCRYPTED_BLOB",
        })
    }
}

/// A client→server message. The kind always matches the payload because
/// the only constructors serialize a typed value.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryMessage {
    kind: MessageKind,
    payload: Vec<u8>,
    origin: String,
}

impl BoundaryMessage {
    pub fn raw_events(origin: impl Into<String>, events: &[ImpressionEvent]) -> Result<Self, PrivacyError> {
        let payload = serde_json::to_vec(events).map_err(|e| PrivacyError::Decode(e.to_string()))?;
        Ok(Self { kind: MessageKind::RawEvents, payload, origin: origin.into() })
    }

    pub fn user_tags(origin: impl Into<String>, tags: &UserTagSet) -> Result<Self, PrivacyError> {
        let payload = serde_json::to_vec(tags).map_err(|e| PrivacyError::Decode(e.to_string()))?;
        Ok(Self { kind: MessageKind::UserTags, payload, origin: origin.into() })
    }

    /// Parameter update: example count, then each matrix as
    /// `u32 rows, u32 cols, f64 values` (little-endian).
    pub fn model_params<T: Scalar>(origin: impl Into<String>, examples: u64, params: &[Matrix<T>]) -> Self {
        let mut payload = examples.to_le_bytes().to_vec();
        payload.extend((params.len() as u32).to_le_bytes());
        for m in params {
            payload.extend((m.rows() as u32).to_le_bytes());
            payload.extend((m.cols() as u32).to_le_bytes());
            for v in m.data() {
                payload.extend(v.as_f64().to_le_bytes());
            }
        }
        Self { kind: MessageKind::ModelParams, payload, origin: origin.into() }
    }

    pub fn encrypted_blob(origin: impl Into<String>, store: &super::EncryptedStore) -> Self {
        Self { kind: MessageKind::EncryptedBlob, payload: store.to_bytes(), origin: origin.into() }
    }

    pub fn kind(&self) -> MessageKind {
        self.kind
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    pub fn size(&self) -> usize {
        self.payload.len()
    }

    pub fn decode_events(&self) -> Result<Vec<ImpressionEvent>, PrivacyError> {
        self.expect(MessageKind::RawEvents)?;
        serde_json::from_slice(&self.payload).map_err(|e| PrivacyError::Decode(e.to_string()))
    }

    pub fn decode_tags(&self) -> Result<UserTagSet, PrivacyError> {
        self.expect(MessageKind::UserTags)?;
        serde_json::from_slice(&self.payload).map_err(|e| PrivacyError::Decode(e.to_string()))
    }

    pub fn decode_params<T: Scalar>(&self) -> Result<(u64, Vec<Matrix<T>>), PrivacyError> {
        self.expect(MessageKind::ModelParams)?;
        let mut r = ByteReader { bytes: &self.payload, pos: 0 };
        let examples = u64::from_le_bytes(r.take()?);
        let n = u32::from_le_bytes(r.take()?) as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let rows = u32::from_le_bytes(r.take()?) as usize;
            let cols = u32::from_le_bytes(r.take()?) as usize;
            let data = (0..rows * cols).map(|_| Ok(T::lit(f64::from_le_bytes(r.take()?)))).collect::<Result<_, PrivacyError>>()?;
            out.push(Matrix::from_vec(rows, cols, data).map_err(|e| PrivacyError::Decode(e.to_string()))?);
        }
        if r.pos != self.payload.len() {
            return Err(PrivacyError::Decode("trailing bytes in parameter payload".into()));
        }
        Ok((examples, out))
    }

    fn expect(&self, kind: MessageKind) -> Result<(), PrivacyError> {
        if self.kind != kind {
            return Err(PrivacyError::Decode(format!("expected {kind}, message is {}", self.kind)));
        }
        Ok(())
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], PrivacyError> {
        let end = self.pos + N;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| PrivacyError::Decode("truncated payload".into()))?;
        self.pos = end;
        Ok(chunk.try_into().expect("exact length"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Local,
    Cloud,
}

impl std::fmt::Display for Topology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Topology::Local => "local",
            Topology::Cloud => "cloud",
        })
    }
}

/// Intercept probability used by default for cloud runs.
pub const DEFAULT_CLOUD_INTERCEPT_RATE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyMode {
    pub topology: Topology,
    /// Probability that the adversary intercepts any one allowed message.
    pub adversary_intercept_rate: f64,
}

impl PrivacyMode {
    pub fn local() -> Self {
        Self { topology: Topology::Local, adversary_intercept_rate: DEFAULT_CLOUD_INTERCEPT_RATE }
    }

    pub fn cloud(adversary_intercept_rate: f64) -> Self {
        Self { topology: Topology::Cloud, adversary_intercept_rate }
    }

    pub fn validate(&self) -> Result<(), PrivacyError> {
        if !(0.0..=1.0).contains(&self.adversary_intercept_rate) {
            return Err(PrivacyError::InvalidRate(self.adversary_intercept_rate));
        }
        Ok(())
    }

    pub fn allows(&self, kind: MessageKind) -> bool {
        !(self.topology == Topology::Local && kind == MessageKind::RawEvents)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Allowed,
    Blocked,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerEntry {
    pub round: u64,
    pub client: String,
    pub kind: MessageKind,
    pub bytes: usize,
    pub verdict: Verdict,
}

/// Append-only record of every boundary crossing attempt.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditLedger {
    entries: Vec<LedgerEntry>,
}

impl AuditLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn append(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    /// ALLOWED entries of the given kind.
    pub fn allowed(&self, kind: MessageKind) -> impl Iterator<Item = &LedgerEntry> {
        self.entries.iter().filter(move |e| e.kind == kind && e.verdict == Verdict::Allowed)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), PrivacyError> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).map_err(|e| PrivacyError::Decode(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Rebuilds a ledger from its JSONL form, preserving order.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, PrivacyError> {
        let mut ledger = Self::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(&line).map_err(|e| PrivacyError::Decode(format!("line {}: {e}", i + 1)))?;
            ledger.append(entry);
        }
        Ok(ledger)
    }
}

/// Checks `msg` against `mode` and records exactly one ledger entry.
/// A blocked message is an error naming its kind and origin.
pub fn send(msg: &BoundaryMessage, mode: &PrivacyMode, ledger: &mut AuditLedger, round: u64) -> Result<Verdict, PrivacyError> {
    let verdict = if mode.allows(msg.kind) { Verdict::Allowed } else { Verdict::Blocked };
    ledger.append(LedgerEntry { round, client: msg.origin.clone(), kind: msg.kind, bytes: msg.size(), verdict });
    match verdict {
        Verdict::Allowed => Ok(verdict),
        Verdict::Blocked => {
            log::warn!("blocked {} from client {} in round {round}", msg.kind, msg.origin);
            Err(PrivacyError::Violation { kind: msg.kind, client: msg.origin.clone() })
        }
    }
}

/// The server side of the channel: guards and logs every message, and keeps
/// the ones that got through.
#[derive(Debug)]
pub struct Boundary<'a> {
    pub mode: PrivacyMode,
    pub round: u64,
    ledger: &'a mut AuditLedger,
    delivered: Vec<BoundaryMessage>,
}

impl<'a> Boundary<'a> {
    pub fn new(mode: PrivacyMode, round: u64, ledger: &'a mut AuditLedger) -> Self {
        Self { mode, round, ledger, delivered: Vec::new() }
    }

    pub fn send(&mut self, msg: BoundaryMessage) -> Result<Verdict, PrivacyError> {
        let verdict = send(&msg, &self.mode, self.ledger, self.round)?;
        self.delivered.push(msg);
        Ok(verdict)
    }

    pub fn delivered(&self) -> &[BoundaryMessage] {
        &self.delivered
    }

    pub fn into_delivered(self) -> Vec<BoundaryMessage> {
        self.delivered
    }
}

/// Marker for a client uplink that may carry only parameters and tags.
#[derive(Debug)]
pub struct LocalOnly;

/// Marker for an uplink that may carry any message kind.
#[derive(Debug)]
pub struct Unrestricted;

/// A message that is legal on a local-mode uplink. Raw events have no
/// constructor here.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalMessage(BoundaryMessage);

impl LocalMessage {
    pub fn model_params<T: Scalar>(origin: impl Into<String>, examples: u64, params: &[Matrix<T>]) -> Self {
        Self(BoundaryMessage::model_params(origin, examples, params))
    }

    pub fn user_tags(origin: impl Into<String>, tags: &UserTagSet) -> Result<Self, PrivacyError> {
        Ok(Self(BoundaryMessage::user_tags(origin, tags)?))
    }

    pub fn encrypted_blob(origin: impl Into<String>, store: &super::EncryptedStore) -> Self {
        Self(BoundaryMessage::encrypted_blob(origin, store))
    }

    pub fn into_inner(self) -> BoundaryMessage {
        self.0
    }
}

/// A client's view of the channel. `Uplink<LocalOnly>` only accepts
/// [`LocalMessage`], so raw events cannot be handed to it at all.
#[derive(Debug)]
pub struct Uplink<'b, 'a, M> {
    boundary: &'b mut Boundary<'a>,
    _mode: PhantomData<M>,
}

impl<'b, 'a> Uplink<'b, 'a, LocalOnly> {
    pub fn local(boundary: &'b mut Boundary<'a>) -> Self {
        Self { boundary, _mode: PhantomData }
    }

    pub fn send(&mut self, msg: LocalMessage) -> Result<Verdict, PrivacyError> {
        self.boundary.send(msg.0)
    }
}

impl<'b, 'a> Uplink<'b, 'a, Unrestricted> {
    pub fn unrestricted(boundary: &'b mut Boundary<'a>) -> Self {
        Self { boundary, _mode: PhantomData }
    }

    pub fn send(&mut self, msg: BoundaryMessage) -> Result<Verdict, PrivacyError> {
        self.boundary.send(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recommender::{Device, TimeOfDay};

    fn event() -> ImpressionEvent {
        ImpressionEvent {
            user_id: "U001".into(),
            ad_id: "A1".into(),
            ts: 1,
            clicked: true,
            converted: false,
            ad_category: "Electronics".into(),
            device: Device::Mobile,
            time_of_day: TimeOfDay::Night,
        }
    }

    #[test]
    fn local_blocks_raw_events_and_logs_it() {
        let mut ledger = AuditLedger::new();
        let msg = BoundaryMessage::raw_events("U001", &[event()]).unwrap();
        match send(&msg, &PrivacyMode::local(), &mut ledger, 0) {
            Err(PrivacyError::Violation { kind, client }) => {
                assert_eq!(kind, MessageKind::RawEvents);
                assert_eq!(client, "U001");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(ledger.entries()[0].verdict, Verdict::Blocked);
        assert_eq!(ledger.entries()[0].bytes, msg.size());
    }

    #[test]
    fn verdict_table() {
        let raw = BoundaryMessage::raw_events("c", &[event()]).unwrap();
        let params = BoundaryMessage::model_params::<f64>("c", 1, &[Matrix::zeros(2, 2)]);
        let tags = BoundaryMessage::user_tags("c", &UserTagSet::default()).unwrap();
        let mut ledger = AuditLedger::new();
        assert_eq!(send(&raw, &PrivacyMode::cloud(0.05), &mut ledger, 0).unwrap(), Verdict::Allowed);
        assert_eq!(send(&params, &PrivacyMode::local(), &mut ledger, 0).unwrap(), Verdict::Allowed);
        assert_eq!(send(&tags, &PrivacyMode::local(), &mut ledger, 0).unwrap(), Verdict::Allowed);
        assert_eq!(send(&params, &PrivacyMode::cloud(0.05), &mut ledger, 1).unwrap(), Verdict::Allowed);
        assert_eq!(ledger.len(), 4);
    }

    #[test]
    fn payloads_round_trip() {
        let m = Matrix::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0]]).unwrap();
        let msg = BoundaryMessage::model_params("c", 17, &[m.clone(), Matrix::scalar(0.5)]);
        let (n, params) = msg.decode_params::<f64>().unwrap();
        assert_eq!(n, 17);
        assert_eq!(params, vec![m, Matrix::scalar(0.5)]);
        assert!(msg.decode_events().is_err());
        let raw = BoundaryMessage::raw_events("c", &[event()]).unwrap();
        assert_eq!(raw.decode_events().unwrap(), vec![event()]);
    }

    #[test]
    fn ledger_jsonl_round_trip() {
        let mut ledger = AuditLedger::new();
        let raw = BoundaryMessage::raw_events("c", &[event()]).unwrap();
        let _ = send(&raw, &PrivacyMode::local(), &mut ledger, 3);
        send(&raw, &PrivacyMode::cloud(0.1), &mut ledger, 4).unwrap();
        let mut buf = Vec::new();
        ledger.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"verdict\":\"BLOCKED\""));
        assert!(text.contains("\"kind\":\"RAW_EVENTS\""));
        assert_eq!(AuditLedger::read_jsonl(buf.as_slice()).unwrap(), ledger);
    }

    #[test]
    fn typed_uplink_delivers() {
        let mut ledger = AuditLedger::new();
        let mut boundary = Boundary::new(PrivacyMode::local(), 0, &mut ledger);
        let mut up = Uplink::local(&mut boundary);
        up.send(LocalMessage::model_params::<f64>("c", 1, &[Matrix::zeros(1, 1)])).unwrap();
        assert_eq!(boundary.delivered().len(), 1);
        let mut open = Uplink::unrestricted(&mut boundary);
        assert!(open.send(BoundaryMessage::raw_events("c", &[event()]).unwrap()).is_err());
        assert_eq!(boundary.delivered().len(), 1);
        assert_eq!(ledger.len(), 2);
    }
}
