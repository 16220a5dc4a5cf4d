use serde::{Deserialize, Serialize};

use super::baselines::{AlsConfig, AlsModel, InteractionMatrix};
use super::harness::{evaluate, CfSystem, ContentSystem, EvalReport, ModelSystem, OracleSystem, RandomSystem, Recommender};
use super::synthetic::SyntheticData;
use super::EvalError;
use crate::encoder::EncoderConfig;
use crate::numerics::Scalar;
use crate::recommender::{train, AdModel, CatalogIndex, TagConfig, TrainConfig, TrainReport, TrainingSet};

/// Settings shared by every system in a comparison run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub k: usize,
    pub seed: u64,
    pub tags: TagConfig,
    pub als: AlsConfig,
    /// Include the planted-truth upper bound as an extra row.
    pub oracle: bool,
}

impl Default for Comparison {
    fn default() -> Self {
        Self { k: 1, seed: 0, tags: TagConfig::default(), als: AlsConfig::default(), oracle: true }
    }
}

/// Fits the ad model on the whole training log.
pub fn train_central<T: Scalar>(
    data: &SyntheticData,
    encoder: EncoderConfig,
    train_config: &TrainConfig,
    seed: u64,
) -> Result<(AdModel<T>, TrainReport), EvalError> {
    let mut model = AdModel::for_catalog(&data.catalog, encoder, false, seed)?;
    let set = TrainingSet::from_log(&model, &data.train, &data.catalog)?;
    let report = train(&mut model, &set, train_config)?;
    Ok((model, report))
}

/// Evaluates `model` next to the random, content-based and CF baselines.
/// The content baseline ranks by the model's own ad embeddings.
pub fn compare<T: Scalar>(
    data: &SyntheticData,
    model: &AdModel<T>,
    cmp: &Comparison,
    spec_hash: &str,
) -> Result<EvalReport, EvalError> {
    let (index, failed) = CatalogIndex::build(model, &data.catalog);
    if let Some(e) = failed.first() {
        log::warn!("{} catalog ads could not be embedded, first: {e}", failed.len());
    }
    let als = AlsModel::fit(&InteractionMatrix::from_log(&data.train), &AlsConfig { seed: cmp.seed, ..cmp.als })?;
    let profiles = data.profiles()?;
    let m = ModelSystem { model, index: &index, tags: cmp.tags };
    let content = ContentSystem { index: &index, seed: cmp.seed };
    let cf = CfSystem { als, catalog: data.catalog.clone() };
    let random = RandomSystem { catalog: data.catalog.clone(), seed: cmp.seed };
    let oracle = OracleSystem { truth: &data.truth, catalog: data.catalog.clone() };
    let mut systems: Vec<&dyn Recommender> = vec![&m, &content, &cf, &random];
    if cmp.oracle {
        systems.push(&oracle);
    }
    evaluate(&systems, &profiles, &data.catalog, &data.truth, &data.test, cmp.k, cmp.seed, spec_hash)
}
