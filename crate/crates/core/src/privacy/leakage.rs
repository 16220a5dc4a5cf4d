use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::boundary::{AuditLedger, MessageKind, PrivacyMode, Verdict};

pub const DEFAULT_REPLAYS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageMetrics {
    /// 1 iff any raw events crossed the boundary.
    pub upload_flag: u8,
    /// Intercepted raw messages in one seeded draw of the adversary.
    pub leakage_events: usize,
    /// Fraction of (replay, client) trials in which at least one of the
    /// client's allowed raw messages was intercepted.
    pub leakage_probability: f64,
}

fn replay_rng(seed: u64, replay: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replay);
    rng
}

/// Runs the Bernoulli interception adversary against the ledger's allowed
/// raw-event messages: once for the event count, then `replays` times for
/// the per-client probability.
pub fn leakage_metrics(ledger: &AuditLedger, mode: &PrivacyMode, replays: usize, seed: u64) -> LeakageMetrics {
    let mut per_client: BTreeMap<&str, usize> = BTreeMap::new();
    for e in ledger.entries() {
        let n = per_client.entry(e.client.as_str()).or_default();
        if e.kind == MessageKind::RawEvents && e.verdict == Verdict::Allowed {
            *n += 1;
        }
    }
    let raw_total: usize = per_client.values().sum();
    let rate = mode.adversary_intercept_rate.clamp(0.0, 1.0);
    if raw_total == 0 {
        return LeakageMetrics { upload_flag: 0, leakage_events: 0, leakage_probability: 0.0 };
    }
    let mut rng = replay_rng(seed, u64::MAX);
    let leakage_events = (0..raw_total).filter(|_| rng.random_bool(rate)).count();
    let counts: Vec<usize> = per_client.values().copied().collect();
    let leaked: usize = (0..replays as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = replay_rng(seed, r);
            counts.iter().filter(|&&n| (0..n).fold(false, |hit, _| rng.random_bool(rate) | hit)).count()
        })
        .sum();
    let trials = replays * counts.len();
    let leakage_probability = if trials == 0 { 0.0 } else { leaked as f64 / trials as f64 };
    LeakageMetrics { upload_flag: 1, leakage_events, leakage_probability }
}

/// Markdown table: system, leakage events, upload flag, leakage probability.
pub fn audit_report(rows: &[(String, LeakageMetrics)]) -> String {
    let mut out =
        String::from("| System | Privacy leakage events | User data uploaded | Leakage probability (%) |\n|---|---:|---:|---:|\n");
    for (name, m) in rows {
        let _ = writeln!(
            out,
            "| {name} | {} | {} | {:.2} |",
            m.leakage_events,
            m.upload_flag,
            100.0 * m.leakage_probability
        );
    }
    out
}
