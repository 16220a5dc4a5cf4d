//! Self-attention encoder producing unit-norm ad embeddings from the [CLS] row.

mod checkpoint;
mod stack;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader, MAGIC};
pub use stack::{
    attention, attention_on_tape, AttentionParams, AttentionVars, EncodeTrace, EncoderConfig, EncoderLayer,
    EncoderStack, LayerVars, DEFAULT_NORM_EPS,
};

use rayon::prelude::*;
use thiserror::Error;

use crate::numerics::{Matrix, NumericsError, Scalar};
use crate::recommender::Ad;
use crate::tokenizer::{EmbeddingTable, TokenizerError, Vocabulary};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("input sequence is empty")]
    EmptySequence,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Unit-norm semantic vector of one ad's copy.
#[derive(Clone, Debug, PartialEq)]
pub struct AdEmbedding<T> {
    pub ad_id: String,
    vector: Matrix<T>,
}

impl<T: Scalar> AdEmbedding<T> {
    /// Normalizes `vector` (1 × d) to unit length.
    pub fn new(ad_id: impl Into<String>, vector: &Matrix<T>) -> Result<Self, EncoderError> {
        let vector = vector.l2_normalize(T::lit(DEFAULT_NORM_EPS))?;
        Ok(Self { ad_id: ad_id.into(), vector })
    }

    pub fn vector(&self) -> &Matrix<T> {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.cols()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.vector.data().iter().zip(other.vector.data()).map(|(&a, &b)| a * b).sum()
    }
}

/// Failure to embed one catalog entry.
#[derive(Debug, Error)]
#[error("ad #{index} ({ad_id}): {source}")]
pub struct CatalogError {
    pub index: usize,
    pub ad_id: String,
    #[source]
    pub source: EncoderError,
}

/// Tokenize → embed → encode for one ad copy.
pub fn embed_text<T: Scalar>(
    ad_id: &str,
    text: &str,
    vocab: &Vocabulary,
    table: &EmbeddingTable<T>,
    stack: &EncoderStack<T>,
) -> Result<AdEmbedding<T>, EncoderError> {
    let seq = vocab.tokenize(text, stack.config.max_len);
    let x = table.embed(&seq)?;
    let v = stack.encode(&x)?;
    AdEmbedding::new(ad_id, &v)
}

/// Embeds every ad with frozen parameters. Element `i` corresponds to
/// `ads[i]`; a failing ad yields an error carrying its index while the
/// others are still processed.
pub fn embed_catalog<T: Scalar>(
    ads: &[Ad],
    vocab: &Vocabulary,
    table: &EmbeddingTable<T>,
    stack: &EncoderStack<T>,
) -> Vec<Result<AdEmbedding<T>, CatalogError>> {
    ads.par_iter()
        .enumerate()
        .map(|(index, ad)| {
            embed_text(&ad.ad_id, &ad.copy, vocab, table, stack)
                .map_err(|source| CatalogError { index, ad_id: ad.ad_id.clone(), source })
        })
        .collect()
}
