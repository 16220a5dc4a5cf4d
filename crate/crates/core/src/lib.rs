//! Privacy-preserving ad recommendation: a self-attention encoder over ad
//! copy, a click-probability head, a local-training boundary with audit, and
//! an offline evaluation harness.
//!
//! Everything numeric is generic over [`numerics::Scalar`]; the aliases below
//! fix it to `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod encoder;
pub mod evaluation;
pub mod numerics;
pub mod privacy;
pub mod recommender;
pub mod tokenizer;

pub type Matrix = numerics::Matrix<f64>;
pub type Tape = numerics::Tape<f64>;
pub type EmbeddingTable = tokenizer::EmbeddingTable<f64>;
pub type EncoderStack = encoder::EncoderStack<f64>;
pub type AdEmbedding = encoder::AdEmbedding<f64>;
pub type AdModel = recommender::AdModel<f64>;
pub type CtrHead = recommender::CtrHead<f64>;
pub type CatalogIndex = recommender::CatalogIndex<f64>;
