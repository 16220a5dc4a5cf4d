//! Click prediction head, training, user tags and ranking.

mod events;
mod model;
mod rank;
mod tags;
mod train;

pub use events::{
    profiles_from_log, read_catalog_jsonl, read_events_jsonl, write_catalog_jsonl, write_events_jsonl, Ad, Device,
    ImpressionEvent, TimeOfDay, UserProfile,
};
pub use model::{predict_ctr, AdModel, CatalogIndex, CtrHead, FeatureSchema, ModelVars};
pub use rank::{recommend, recommend_with_tags, sort_scored, write_rankings_csv, Scored};
pub use tags::{build_user_tags, category_counts, TagConfig, UserTag, UserTagSet};
pub use train::{affinity, dataset_loss, loss_and_gradients, train, TrainConfig, TrainReport, TrainingExample, TrainingSet};

use thiserror::Error;

use crate::encoder::EncoderError;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum RecommenderError {
    #[error("event {user_id}/{ad_id} is marked converted but not clicked")]
    ConversionWithoutClick { user_id: String, ad_id: String },
    #[error("profile {profile} received an event of user {event_user}")]
    ForeignEvent { profile: String, event_user: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("user {0} has no interaction history")]
    EmptyHistory(String),
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("training log is empty")]
    EmptyLog,
    #[error("ad {0} is not in the catalog")]
    UnknownAd(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
