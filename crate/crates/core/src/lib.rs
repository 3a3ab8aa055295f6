//! Soft-prompt data augmentation for dense retrieval, at desk scale.
//!
//! A tiny causal LM is pretrained on the target corpus and frozen; a soft
//! prompt is tuned on a handful of labeled pairs; the best group of in-prompt
//! examples is selected; weak queries are generated for unlabeled documents
//! and filtered with BM25; and a bi-encoder is trained on the result.
//!
//! Everything numeric is generic over [`numerics::Scalar`] (`f32` or `f64`);
//! the aliases at the crate root fix `f32`.

pub mod augmentor;
pub mod bm25;
pub mod data;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod prompt_filter;
pub mod prompt_tuning;
pub mod ranking;
pub mod retriever;
pub mod seed;
pub mod text;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use ranking::ScoredList;

pub type Tensor = numerics::Tensor<f32>;
pub type DecoderLm = lm::DecoderLm<f32>;
pub type SoftPrompt = prompt_tuning::SoftPrompt<f32>;
pub type BiEncoder = retriever::BiEncoder<f32>;
pub type CorpusEmbeddings = retriever::CorpusEmbeddings<f32>;
