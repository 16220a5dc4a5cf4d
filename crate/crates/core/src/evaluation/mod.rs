//! Synthetic click data, baseline recommenders and the CTR/CR harness.

mod baselines;
mod harness;
mod metrics;
mod pipeline;
mod synthetic;

pub use baselines::{
    derive_seed, recommend_content, recommend_random, user_content_vector, AlsConfig, AlsModel, InteractionMatrix,
};
pub use harness::{
    evaluate, simulate_outcome, CfSystem, ContentSystem, EvalReport, ModelSystem, OracleSystem, RandomSystem,
    Recommender, SystemReport,
};
pub use metrics::{auc, replay, ReplayMetrics};
pub use pipeline::{compare, train_central, Comparison};
pub use synthetic::{generate, stratified_split, GroundTruth, SyntheticData, SyntheticSpec, SyntheticUser, DEFAULT_CATEGORIES};

use thiserror::Error;

use crate::numerics::NumericsError;
use crate::recommender::RecommenderError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid configuration: {0}")]
    InvalidSpec(String),
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("interaction matrix has no entries")]
    EmptyInteractions,
    #[error("test log is empty")]
    EmptyTestLog,
    #[error("ad {0} is not in the catalog")]
    UnknownAd(String),
    #[error(transparent)]
    Recommender(#[from] RecommenderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
