use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Ad, AdModel, ImpressionEvent, RecommenderError};
use crate::numerics::{Adam, AdamConfig, Matrix, Scalar, Tape};
use crate::tokenizer::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 1e-3, batch_size: 32, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample<T> {
    /// Index into [`TrainingSet::sequences`].
    pub sequence: usize,
    pub features: Vec<T>,
    pub label: bool,
}

/// Tokenized ads and labeled feature rows derived from a click log.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet<T> {
    pub sequences: Vec<TokenSequence>,
    pub examples: Vec<TrainingExample<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    /// Every training label was the same class.
    pub degenerate_labels: bool,
    pub examples: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Click rate over `(clicks, impressions)`; zero without impressions.
pub fn affinity(counts: (u32, u32)) -> f64 {
    if counts.1 == 0 {
        0.0
    } else {
        f64::from(counts.0) / f64::from(counts.1)
    }
}

/// The user's click rate in the event's category over their events strictly
/// before it in (timestamp, ad id) order. One value per input event.
fn causal_affinities(log: &[ImpressionEvent]) -> Vec<f64> {
    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in log.iter().enumerate() {
        by_user.entry(&e.user_id).or_default().push(i);
    }
    let mut out = vec![0.0; log.len()];
    for indices in by_user.values_mut() {
        indices.sort_by(|&a, &b| (log[a].ts, &log[a].ad_id, a).cmp(&(log[b].ts, &log[b].ad_id, b)));
        let mut seen: HashMap<&str, (u32, u32)> = HashMap::new();
        for &i in indices.iter() {
            let e = &log[i];
            let counts = seen.entry(&e.ad_category).or_default();
            out[i] = affinity(*counts);
            counts.0 += u32::from(e.clicked);
            counts.1 += 1;
        }
    }
    out
}

impl<T: Scalar> TrainingSet<T> {
    /// One example per event. The category-affinity feature of an event is
    /// the user's empirical click rate in that category over their earlier
    /// events, so no label leaks into its own features.
    pub fn from_log(model: &AdModel<T>, log: &[ImpressionEvent], catalog: &[Ad]) -> Result<Self, RecommenderError> {
        let ads: HashMap<&str, &Ad> = catalog.iter().map(|a| (a.ad_id.as_str(), a)).collect();
        let affinities = causal_affinities(log);
        let mut seq_index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut sequences = Vec::new();
        let mut examples = Vec::with_capacity(log.len());
        for (e, affinity) in log.iter().zip(affinities) {
            e.validate()?;
            let ad = ads.get(e.ad_id.as_str()).ok_or_else(|| RecommenderError::UnknownAd(e.ad_id.clone()))?;
            let sequence = *seq_index.entry(&ad.ad_id).or_insert_with(|| {
                sequences.push(model.tokenize(&ad.copy));
                sequences.len() - 1
            });
            let features = model.features(e.device, e.time_of_day, &e.ad_category, affinity);
            examples.push(TrainingExample { sequence, features, label: e.clicked });
        }
        Ok(Self { sequences, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Mean BCE over `batch` (indices into the set's examples) and its gradient
/// w.r.t. every model parameter, in [`AdModel::params`] order.
pub fn loss_and_gradients<T: Scalar>(
    model: &AdModel<T>,
    set: &TrainingSet<T>,
    batch: &[usize],
) -> Result<(T, Vec<Matrix<T>>), RecommenderError> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true);
    let loss = batch_loss_on_tape(model, set, batch, &mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let all = vars.all();
    let params = model.params();
    let g = all.iter().zip(params).map(|(&v, p)| grads.get_or_zeros(v, p.shape())).collect();
    Ok((tape.value(loss).get(0, 0), g))
}

fn batch_loss_on_tape<T: Scalar>(
    model: &AdModel<T>,
    set: &TrainingSet<T>,
    batch: &[usize],
    tape: &mut Tape<T>,
    vars: &super::ModelVars,
) -> Result<crate::numerics::Var, RecommenderError> {
    if batch.is_empty() {
        return Err(RecommenderError::EmptyLog);
    }
    let mut distinct: Vec<usize> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut rows = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for &i in batch {
        let ex = &set.examples[i];
        let s = *slot.entry(ex.sequence).or_insert_with(|| {
            distinct.push(ex.sequence);
            distinct.len() - 1
        });
        rows.push((s, ex.features.as_slice()));
        labels.push(if ex.label { T::one() } else { T::zero() });
    }
    let encoded = distinct
        .iter()
        .map(|&s| model.encode_on_tape(tape, vars, &set.sequences[s]))
        .collect::<Result<Vec<_>, _>>()?;
    let logits = model.logits_on_tape(tape, vars, &encoded, &rows)?;
    Ok(tape.bce_with_logits(logits, &labels)?)
}

/// Mean BCE over the whole set without recording gradients.
pub fn dataset_loss<T: Scalar>(model: &AdModel<T>, set: &TrainingSet<T>) -> Result<T, RecommenderError> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let all: Vec<usize> = (0..set.len()).collect();
    let loss = batch_loss_on_tape(model, set, &all, &mut tape, &vars)?;
    Ok(tape.value(loss).get(0, 0))
}

/// Mini-batch Adam on binary cross-entropy of the click labels.
pub fn train<T: Scalar>(
    model: &mut AdModel<T>,
    set: &TrainingSet<T>,
    config: &TrainConfig,
) -> Result<TrainReport, RecommenderError> {
    if set.is_empty() {
        return Err(RecommenderError::EmptyLog);
    }
    let positives = set.examples.iter().filter(|e| e.label).count();
    let degenerate_labels = positives == 0 || positives == set.len();
    if degenerate_labels {
        log::warn!("all {} training labels are the same class", set.len());
    }
    let initial_loss = dataset_loss(model, set)?.as_f64();
    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(config.batch_size.max(1)).enumerate() {
            let (loss, grads) = loss_and_gradients(model, set, batch)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(RecommenderError::NonFiniteLoss { epoch, batch: b });
            }
            total += loss * batch.len() as f64;
            adam.step(&mut model.params_mut(), &grads)?;
        }
        let mean = total / set.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(TrainReport { initial_loss, epoch_losses, degenerate_labels, examples: set.len() })
}
