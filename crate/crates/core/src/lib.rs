//! Ordinal severity prediction for age-restricted content aspects of movie
//! dialogue scripts.
//!
//! A document encoder (utterance-level Bi-LSTM, TextRCNN, TextCNN or averaged
//! word vectors) feeds a 4-way classification head. In multitask mode the same
//! encoder is applied to both members of a sampled pair and a ranking head
//! predicts whether the left movie is less, equally, or more severe than the
//! right one. Both objectives are optimized jointly over a single parameter set.
//!
//! Modules:
//! - [`corpus`]: manifest/script ingestion, vote filtering, splits, statistics
//! - [`embedding`]: tokenization, word-vector tables, utterance embedders, disk cache
//! - [`backbones`]: document encoders and the classification head
//! - [`siamese`]: pair sampling, the joint training loop, prediction and comparison
//! - [`eval`]: confusion matrices, macro F1, cross-validation, randomization tests
//! - [`interpret`]: comparator selection and pairwise comparison reports
//! - [`synthetic`]: planted-signal corpora for end-to-end checks

pub mod backbones;
pub mod corpus;
pub mod embedding;
mod error;
pub mod eval;
pub mod interpret;
pub mod nn;
pub mod parallel;
pub mod seed;
pub mod siamese;
pub mod synthetic;

pub use error::{Error, Result};
