//! The client→server boundary: typed messages, guard, audit ledger,
//! federated rounds, leakage simulation, encrypted storage and anonymization.

mod boundary;
mod crypto;
mod federated;
mod leakage;

pub use boundary::{
    send, AuditLedger, Boundary, BoundaryMessage, LedgerEntry, LocalMessage, LocalOnly, MessageKind, PrivacyMode,
    Topology, Unrestricted, Uplink, Verdict, DEFAULT_CLOUD_INTERCEPT_RATE,
};
pub use crypto::{
    anonymize, coarsen_timestamp, decrypt_store, encrypt_store, encrypt_store_with, pseudonym, random_pseudonym_key,
    read_key_file, write_key_file, EncryptedStore, StoreKey, KEY_LEN,
};
pub use federated::{average_deltas, run_round, RoundOptions, RoundReport};
pub use leakage::{audit_report, leakage_metrics, LeakageMetrics, DEFAULT_REPLAYS};

use thiserror::Error;

use crate::numerics::NumericsError;
use crate::recommender::RecommenderError;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("privacy violation: {kind} from client {client} blocked")]
    Violation { kind: MessageKind, client: String },
    #[error("authentication failed: wrong key or tampered data")]
    Authentication,
    #[error("key must be 32 bytes, got {0}")]
    KeyLength(usize),
    #[error("intercept rate must be in [0, 1], got {0}")]
    InvalidRate(f64),
    #[error("a round needs at least one client")]
    NoClients,
    #[error("client {0} has no events")]
    EmptyClient(String),
    #[error("malformed payload: {0}")]
    Decode(String),
    #[error(transparent)]
    Recommender(#[from] RecommenderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
