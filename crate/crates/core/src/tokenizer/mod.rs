//! Ad-copy tokenization and the token + position embedding tables.

mod embedding;
mod vocab;

pub use embedding::EmbeddingTable;
pub use vocab::{split_words, TokenSequence, Vocabulary, CLS, PAD, UNK};

use thiserror::Error;

use crate::numerics::NumericsError;

/// Default maximum sequence length, [CLS] included.
pub const DEFAULT_MAX_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("sequence of length {len} exceeds the position table ({max} rows)")]
    SequenceTooLong { len: usize, max: usize },
    #[error("vocabulary file line {line}: {reason}")]
    InvalidVocabFile { line: usize, reason: String },
    #[error("token id {id} outside vocabulary of {size}")]
    UnknownId { id: usize, size: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
