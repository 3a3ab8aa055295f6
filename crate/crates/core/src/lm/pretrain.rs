use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{DecoderLm, HeadRows};
use super::vocab::EOS;
use crate::error::{Error, Result};
use crate::numerics::{AdamW, AdamWConfig, Scalar, StepOutcome, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    /// Tokens per training chunk; documents are packed back to back.
    pub chunk_len: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            optimizer: AdamWConfig::with_lr(1e-3),
            chunk_len: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Next-token training on packed document streams.
///
/// Each epoch shuffles document order, concatenates the documents (each
/// followed by EOS) and cuts the stream into `chunk_len` windows; every
/// window is one optimizer step, placed at a random position offset so that
/// every position of the context is trained even with short windows.
pub fn pretrain<S: Scalar>(lm: &mut DecoderLm<S>, docs: &[Vec<usize>], cfg: &PretrainConfig) -> Result<PretrainReport> {
    if docs.iter().all(Vec::is_empty) {
        return Err(Error::Config("pretraining corpus has no tokens".into()));
    }
    if lm.params().iter().any(|p| !p.trainable) {
        return Err(Error::Contract("pretraining requires every parameter trainable".into()));
    }
    let context = lm.config().context_length;
    let chunk_len = cfg.chunk_len.clamp(2, context);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut report = PretrainReport::default();
    let mut order: Vec<usize> = (0..docs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let stream: Vec<usize> = order
            .iter()
            .flat_map(|&i| docs[i].iter().copied().chain(std::iter::once(EOS)))
            .collect();
        let mut total = 0.0;
        let mut chunks = 0usize;
        for chunk in stream.chunks(chunk_len).filter(|c| c.len() >= 2) {
            let offset = rng.random_range(0..=context - chunk.len());
            let loss = step(lm, &mut opt, chunk, offset).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!(
                    "pretraining diverged at epoch {epoch}, chunk {chunks}: {what}"
                )),
                other => other,
            })?;
            total += loss;
            chunks += 1;
        }
        let mean = total / chunks.max(1) as f64;
        log::info!("pretrain epoch {epoch}: loss {mean:.4}");
        report.epoch_losses.push(mean);
    }
    report.steps = opt.steps_taken();
    if let Some(&last) = report.epoch_losses.last() {
        lm.final_train_loss = Some(last);
    }
    Ok(report)
}

fn step<S: Scalar>(lm: &mut DecoderLm<S>, opt: &mut AdamW<S>, chunk: &[usize], offset: usize) -> Result<f64> {
    let targets: Vec<Option<usize>> = chunk[1..].iter().map(|&t| Some(t)).chain([None]).collect();
    let (loss, grads) = {
        let mut tape = Tape::new();
        let (logits, vars) = lm.record(&mut tape, None, chunk, true, HeadRows::All, offset)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        let mut grads = tape.backward(loss)?;
        let grads: Vec<_> = vars.iter().map(|&v| grads.take(v)).collect();
        (tape.value(loss).item().as_f64(), grads)
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    let outcome = opt.step(lm.params_mut().iter_mut().zip(grads.iter().map(Option::as_ref)));
    if outcome == StepOutcome::Rejected {
        log::warn!("pretraining step skipped");
    }
    Ok(loss)
}
