use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{DecoderLm, DecoderState};
use super::vocab::EOS;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// Decoding settings. Greedy mode ignores temperature, top-k and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    /// 0 disables top-k truncation.
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub stop_ids: Vec<usize>,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            top_k: 0,
            max_new_tokens: 32,
            stop_ids: vec![EOS],
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Autoregressive continuation of `[prefix; prompt]`, excluding the stop token.
///
/// Generation also ends when the context window is full.
pub fn generate<S: Scalar>(
    lm: &DecoderLm<S>,
    prefix: Option<&Tensor<S>>,
    prompt: &[usize],
    cfg: &GenerationConfig,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    let p = prefix.map_or(0, Tensor::rows);
    let limit = lm.config().context_length;
    if p + prompt.len() > limit {
        return Err(Error::Length {
            prefix: p,
            tokens: prompt.len(),
            limit,
        });
    }
    if p + prompt.len() == 0 {
        return Err(Error::Contract("generation needs a non-empty prompt or prefix".into()));
    }
    let mut state = lm.start_state();
    let logits = lm.extend(&mut state, prefix, prompt)?;
    continue_from(lm, state, logits, cfg)
}

/// Decodes onward from a state whose next-token logits are `logits`.
pub fn continue_from<S: Scalar>(
    lm: &DecoderLm<S>,
    mut state: DecoderState<S>,
    mut logits: Vec<S>,
    cfg: &GenerationConfig,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    let limit = lm.config().context_length;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    while out.len() < cfg.max_new_tokens {
        let next = match cfg.mode {
            DecodeMode::Greedy => argmax(&logits),
            DecodeMode::Sample => sample(&logits, cfg, &mut rng)?,
        };
        if cfg.stop_ids.contains(&next) {
            break;
        }
        out.push(next);
        if state.len() + 1 >= limit || out.len() == cfg.max_new_tokens {
            break;
        }
        logits = lm.extend(&mut state, None, &[next])?;
    }
    Ok(out)
}

fn argmax<S: Scalar>(logits: &[S]) -> usize {
    // first maximum wins
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn sample<S: Scalar>(logits: &[S], cfg: &GenerationConfig, rng: &mut ChaCha8Rng) -> Result<usize> {
    let scaled: Vec<f64> = logits.iter().map(|v| v.as_f64() / cfg.temperature).collect();
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    if cfg.top_k > 0 && cfg.top_k < scaled.len() {
        order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
        order.truncate(cfg.top_k);
    }
    let max = order.iter().map(|&i| scaled[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = order.iter().map(|&i| (scaled[i] - max).exp()).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::NonFinite(format!("sampling weights: {e}")))?;
    Ok(order[dist.sample(rng)])
}
