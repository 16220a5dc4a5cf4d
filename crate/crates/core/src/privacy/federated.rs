use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::boundary::{send, Boundary, BoundaryMessage, LocalMessage, Topology, Uplink};
use super::{AuditLedger, PrivacyError, PrivacyMode};
use crate::numerics::{Matrix, Scalar};
use crate::recommender::{
    build_user_tags, train, Ad, AdModel, CatalogIndex, ImpressionEvent, TagConfig, TrainConfig, TrainingSet, UserProfile,
    UserTagSet,
};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundOptions {
    /// Weight each client's delta by its example count instead of a plain mean.
    pub weighted: bool,
    /// Clients that try to upload their raw events whatever the mode; used
    /// to exercise the guard.
    pub misbehaving: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    pub topology: Topology,
    /// Clients whose update reached the server.
    pub contributors: Vec<String>,
    /// Clients whose round was aborted, with the reason.
    pub aborted: Vec<(String, String)>,
    /// Tags received by (LOCAL) or computed on (CLOUD) the server.
    pub tags: BTreeMap<String, UserTagSet>,
    pub examples: usize,
}

struct ClientUpdate<T> {
    client: String,
    examples: usize,
    delta: Vec<Matrix<T>>,
    tags: UserTagSet,
}

fn local_update<T: Scalar>(
    global: &AdModel<T>,
    profile: &UserProfile,
    catalog: &[Ad],
    train_config: &TrainConfig,
    tag_config: &TagConfig,
) -> Result<ClientUpdate<T>, PrivacyError> {
    let mut local = global.clone();
    let set = TrainingSet::from_log(&local, profile.events(), catalog)?;
    train(&mut local, &set, train_config)?;
    let (index, _) = CatalogIndex::build(&local, catalog);
    let tags = build_user_tags(profile, &local, &index, tag_config)?;
    Ok(ClientUpdate { client: profile.user_id.clone(), examples: set.len(), delta: local.delta_from(global)?, tags })
}

/// Averages parameter deltas; `weights` need not be normalized.
pub fn average_deltas<T: Scalar>(deltas: &[Vec<Matrix<T>>], weights: &[f64]) -> Result<Vec<Matrix<T>>, PrivacyError> {
    let total: f64 = weights.iter().sum();
    let first = deltas.first().ok_or(PrivacyError::NoClients)?;
    let mut out: Vec<Matrix<T>> = first.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    for (delta, &w) in deltas.iter().zip(weights) {
        if delta.len() != out.len() {
            return Err(PrivacyError::Decode("parameter count differs between clients".into()));
        }
        for (acc, d) in out.iter_mut().zip(delta) {
            acc.add_assign(&d.scale(T::lit(w / total)))?;
        }
    }
    Ok(out)
}

/// One training round over `clients`.
///
/// LOCAL: every client trains a copy of the global model on its own events,
/// then uploads only its parameter delta and tags through a local-only
/// uplink; the server averages the deltas it receives into `model`.
/// CLOUD: every client uploads its raw events and the server trains `model`
/// on their concatenation. Every message lands in `ledger`; a blocked
/// message aborts only its sender's round.
#[allow(clippy::too_many_arguments)]
pub fn run_round<T: Scalar>(
    clients: &[UserProfile],
    mode: &PrivacyMode,
    model: &mut AdModel<T>,
    catalog: &[Ad],
    train_config: &TrainConfig,
    tag_config: &TagConfig,
    options: &RoundOptions,
    ledger: &mut AuditLedger,
    round: u64,
) -> Result<RoundReport, PrivacyError> {
    if clients.is_empty() {
        return Err(PrivacyError::NoClients);
    }
    mode.validate()?;
    let mut report = RoundReport {
        round,
        topology: mode.topology,
        contributors: Vec::new(),
        aborted: Vec::new(),
        tags: BTreeMap::new(),
        examples: 0,
    };
    match mode.topology {
        Topology::Local => {
            let updates: Vec<Result<ClientUpdate<T>, PrivacyError>> = clients
                .par_iter()
                .map(|p| {
                    if p.is_cold() {
                        return Err(PrivacyError::EmptyClient(p.user_id.clone()));
                    }
                    local_update(model, p, catalog, train_config, tag_config)
                })
                .collect();
            let mut boundary = Boundary::new(*mode, round, ledger);
            for (profile, update) in clients.iter().zip(updates) {
                let update = match update {
                    Ok(u) => u,
                    Err(e) => {
                        report.aborted.push((profile.user_id.clone(), e.to_string()));
                        continue;
                    }
                };
                if options.misbehaving.contains(&update.client) {
                    let raw = BoundaryMessage::raw_events(&update.client, profile.events())?;
                    if let Err(e) = boundary.send(raw) {
                        report.aborted.push((update.client.clone(), e.to_string()));
                        continue;
                    }
                }
                let mut uplink = Uplink::local(&mut boundary);
                uplink.send(LocalMessage::model_params(&update.client, update.examples as u64, &update.delta))?;
                uplink.send(LocalMessage::user_tags(&update.client, &update.tags)?)?;
            }
            let mut deltas = Vec::new();
            let mut weights = Vec::new();
            for msg in boundary.into_delivered() {
                match msg.kind() {
                    super::MessageKind::ModelParams => {
                        let (n, delta) = msg.decode_params::<T>()?;
                        weights.push(if options.weighted { n as f64 } else { 1.0 });
                        deltas.push(delta);
                        report.contributors.push(msg.origin().to_string());
                        report.examples += n as usize;
                    }
                    super::MessageKind::UserTags => {
                        report.tags.insert(msg.origin().to_string(), msg.decode_tags()?);
                    }
                    _ => {}
                }
            }
            if !deltas.is_empty() {
                model.apply_delta(&average_deltas(&deltas, &weights)?)?;
            }
        }
        Topology::Cloud => {
            let mut events: Vec<ImpressionEvent> = Vec::new();
            for p in clients {
                let msg = BoundaryMessage::raw_events(&p.user_id, p.events())?;
                match send(&msg, mode, ledger, round) {
                    Ok(_) => {
                        events.extend(msg.decode_events()?);
                        report.contributors.push(p.user_id.clone());
                    }
                    Err(e) => report.aborted.push((p.user_id.clone(), e.to_string())),
                }
            }
            if !events.is_empty() {
                let set = TrainingSet::from_log(model, &events, catalog)?;
                train(model, &set, train_config)?;
                report.examples = set.len();
                let (index, _) = CatalogIndex::build(model, catalog);
                for p in clients.iter().filter(|p| !p.is_cold()) {
                    report.tags.insert(p.user_id.clone(), build_user_tags(p, model, &index, tag_config)?);
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::privacy::{MessageKind, Verdict};
    use crate::recommender::{profiles_from_log, Device, TimeOfDay};

    fn setup() -> (Vec<Ad>, Vec<UserProfile>, AdModel<f64>) {
        let cats = ["Electronics", "Travel", "Finance"];
        let catalog: Vec<Ad> = (0..6)
            .map(|i| Ad { ad_id: format!("A{i}"), copy: format!("{} offer {i}", cats[i % 3]), category: cats[i % 3].into() })
            .collect();
        let mut log = Vec::new();
        for u in 0..3 {
            for j in 0..6 {
                log.push(ImpressionEvent {
                    user_id: format!("U{u}"),
                    ad_id: format!("A{j}"),
                    ts: 1_000 * j as i64,
                    clicked: (j + u) % 3 == 0,
                    converted: false,
                    ad_category: cats[j % 3].into(),
                    device: Device::Laptop,
                    time_of_day: TimeOfDay::Night,
                });
            }
        }
        let profiles = profiles_from_log(&log).unwrap().into_values().collect();
        let config = EncoderConfig { d_model: 8, d_k: 8, layers: 1, max_len: 8, ..EncoderConfig::default() };
        let model = AdModel::for_catalog(&catalog, config, false, 3).unwrap();
        (catalog, profiles, model)
    }

    fn tc() -> TrainConfig {
        TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() }
    }

    #[test]
    fn local_round_sends_no_raw_events() {
        let (catalog, profiles, mut model) = setup();
        let before = model.clone();
        let mut ledger = AuditLedger::new();
        let r = run_round(&profiles, &PrivacyMode::local(), &mut model, &catalog, &tc(), &TagConfig::default(), &RoundOptions::default(), &mut ledger, 0)
            .unwrap();
        assert_eq!(ledger.allowed(MessageKind::RawEvents).count(), 0);
        assert_eq!(ledger.allowed(MessageKind::ModelParams).count(), 3);
        assert_eq!(ledger.allowed(MessageKind::UserTags).count(), 3);
        assert_eq!(r.contributors.len(), 3);
        assert_eq!(r.tags.len(), 3);
        assert_ne!(model, before);
    }

    #[test]
    fn cloud_round_uploads_each_client_once() {
        let (catalog, profiles, mut model) = setup();
        let mut ledger = AuditLedger::new();
        run_round(&profiles, &PrivacyMode::cloud(0.05), &mut model, &catalog, &tc(), &TagConfig::default(), &RoundOptions::default(), &mut ledger, 0)
            .unwrap();
        assert_eq!(ledger.allowed(MessageKind::RawEvents).count(), 3);
        assert_eq!(ledger.len(), 3);
    }

    #[test]
    fn misbehaving_client_is_blocked_and_excluded() {
        let (catalog, profiles, mut model) = setup();
        let mut ledger = AuditLedger::new();
        let options = RoundOptions { misbehaving: ["U1".to_string()].into(), ..RoundOptions::default() };
        let r = run_round(&profiles, &PrivacyMode::local(), &mut model, &catalog, &tc(), &TagConfig::default(), &options, &mut ledger, 0)
            .unwrap();
        let blocked: Vec<_> = ledger.entries().iter().filter(|e| e.verdict == Verdict::Blocked).collect();
        assert_eq!(blocked.len(), 1);
        assert_eq!(blocked[0].client, "U1");
        assert_eq!(r.aborted.len(), 1);
        assert_eq!(r.contributors, ["U0", "U2"]);
        assert_eq!(ledger.allowed(MessageKind::RawEvents).count(), 0);
    }

    #[test]
    fn single_client_local_equals_centralized() {
        let (catalog, profiles, model) = setup();
        let mut federated = model.clone();
        let mut ledger = AuditLedger::new();
        run_round(&profiles[..1], &PrivacyMode::local(), &mut federated, &catalog, &tc(), &TagConfig::default(), &RoundOptions::default(), &mut ledger, 0)
            .unwrap();
        let mut central = model.clone();
        let set = TrainingSet::from_log(&central, profiles[0].events(), &catalog).unwrap();
        train(&mut central, &set, &tc()).unwrap();
        for (a, b) in federated.params().iter().zip(central.params()) {
            assert!(a.max_abs_diff(b) <= 1e-9);
        }
    }

    #[test]
    fn weighted_average_uses_counts() {
        let a = vec![Matrix::scalar(1.0)];
        let b = vec![Matrix::scalar(4.0)];
        assert_eq!(average_deltas(&[a.clone(), b.clone()], &[1.0, 1.0]).unwrap()[0].get(0, 0), 2.5);
        assert_eq!(average_deltas(&[a, b], &[2.0, 1.0]).unwrap()[0].get(0, 0), 2.0);
    }
}
