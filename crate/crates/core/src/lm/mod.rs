//! Tiny causal language model: vocabulary, forward pass with soft-prompt
//! prefixes, masked loss, decoding, perplexity and pretraining.

mod generate;
mod model;
mod pretrain;
mod vocab;

use rayon::prelude::*;

pub use generate::{continue_from, generate, DecodeMode, GenerationConfig};
pub use model::{DecoderLm, DecoderState, LmConfig};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::prompt_tuning::TuningInstance;

/// `exp` of the mean NLL over every masked token, pooled across instances.
pub fn perplexity<S: Scalar>(lm: &DecoderLm<S>, prefix: Option<&Tensor<S>>, dataset: &[TuningInstance]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Contract("perplexity of an empty dataset".into()));
    }
    let parts: Vec<(f64, usize)> = dataset
        .par_iter()
        .map(|inst| lm.masked_nll(prefix, &inst.ids, &inst.loss_mask))
        .collect::<Result<_>>()?;
    let (nll, count) = parts
        .iter()
        .fold((0.0, 0usize), |(s, c), &(ps, pc)| (s + ps, c + pc));
    Ok((nll / count as f64).exp())
}
