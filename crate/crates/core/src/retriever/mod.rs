//! Bi-encoder dense retrieval: mean-pooled transformer towers trained with
//! in-batch negatives, exact dot-product search, and BM25 reranking.

mod search;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use search::{rerank_bm25, retrieve, retrieve_all, retrieve_vector, CorpusEmbeddings};

use crate::error::{Error, Result};
use crate::lm::{Vocabulary, EOS};
use crate::metrics::{ndcg_at_k, Qrels};
use crate::nn::{self, StackLayout, StackShape};
use crate::numerics::{checkpoint, AdamW, AdamWConfig, ParamStore, Scalar, StepOutcome, Tape, Tensor, Var};
use crate::seed;
use crate::text::terms;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    /// Texts are truncated to this many tokens.
    pub max_length: usize,
    pub shared_towers: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            d_model: 128,
            num_heads: 4,
            max_length: 128,
            shared_towers: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tower {
    Query,
    Document,
}

#[derive(Serialize, Deserialize)]
struct EncoderMeta {
    config: EncoderConfig,
    vocab: Vocabulary,
}

const CHECKPOINT_KIND: &str = "bi-encoder";

/// Query and document towers over one vocabulary.
#[derive(Clone, Debug)]
pub struct BiEncoder<S> {
    config: EncoderConfig,
    vocab: Vocabulary,
    params: ParamStore<S>,
    query: StackLayout,
    document: StackLayout,
    fingerprint: String,
}

fn tower_prefixes(shared: bool) -> (&'static str, &'static str) {
    if shared {
        ("shared.", "shared.")
    } else {
        ("query.", "doc.")
    }
}

impl<S: Scalar> BiEncoder<S> {
    pub fn new(config: EncoderConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let shape = Self::shape(&config, &vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (qp, dp) = tower_prefixes(config.shared_towers);
        let query = nn::init_stack(&mut params, qp, shape, &mut rng)?;
        let document = if config.shared_towers {
            query.clone()
        } else {
            nn::init_stack(&mut params, dp, shape, &mut rng)?
        };
        let mut enc = Self {
            config,
            vocab,
            params,
            query,
            document,
            fingerprint: String::new(),
        };
        enc.refresh_fingerprint();
        Ok(enc)
    }

    fn shape(config: &EncoderConfig, vocab: &Vocabulary) -> StackShape {
        StackShape {
            num_layers: config.num_layers,
            d_model: config.d_model,
            num_heads: config.num_heads,
            max_positions: config.max_length,
            vocab_size: vocab.len(),
        }
    }

    fn refresh_fingerprint(&mut self) {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).unwrap_or_default());
        h.update(self.vocab.fingerprint().as_bytes());
        h.update(self.params.fingerprint().as_bytes());
        self.fingerprint = hex::encode(h.finalize());
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Word ids, truncated; empty text becomes a lone EOS.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = terms(text)
            .iter()
            .take(self.config.max_length)
            .map(|t| self.vocab.id(t).unwrap_or(crate::lm::UNK))
            .collect();
        if ids.is_empty() {
            log::warn!("encoding empty text as EOS");
            ids.push(EOS);
        }
        ids
    }

    fn layout(&self, tower: Tower) -> &StackLayout {
        match tower {
            Tower::Query => &self.query,
            Tower::Document => &self.document,
        }
    }

    fn record(&self, tape: &mut Tape<'_, S>, vars: &[Var], tower: Tower, ids: &[usize]) -> Result<Var> {
        let hidden = nn::run_stack(tape, vars, self.layout(tower), None, ids, false, 0)?;
        tape.mean_rows(hidden)
    }

    /// Mean-pooled final states, one row per text.
    pub fn encode(&self, tower: Tower, texts: &[&str]) -> Result<Tensor<S>> {
        let rows: Vec<Vec<S>> = texts
            .par_iter()
            .map(|t| self.encode_one(tower, t))
            .collect::<Result<_>>()?;
        if rows.is_empty() {
            return Ok(Tensor::zeros(&[0, self.config.d_model]));
        }
        Ok(Tensor::from_rows(&rows))
    }

    pub fn encode_one(&self, tower: Tower, text: &str) -> Result<Vec<S>> {
        let ids = self.tokenize(text);
        let mut tape = Tape::new();
        let vars = nn::bind(&mut tape, &self.params, false);
        let v = self.record(&mut tape, &vars, tower, &ids)?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Mean in-batch softmax loss over `(query ids, document ids)` pairs.
    fn batch_loss<'a>(&'a self, tape: &mut Tape<'a, S>, batch: &[(&[usize], &[usize])]) -> Result<(Var, Vec<Var>)> {
        let vars = nn::bind(tape, &self.params, true);
        let mut qs = Vec::with_capacity(batch.len());
        let mut ds = Vec::with_capacity(batch.len());
        for (q, d) in batch {
            qs.push(self.record(tape, &vars, Tower::Query, q)?);
            ds.push(self.record(tape, &vars, Tower::Document, d)?);
        }
        let q = tape.concat_rows(&qs)?;
        let d = tape.concat_rows(&ds)?;
        let dt = tape.transpose(d)?;
        let scores = tape.matmul(q, dt)?;
        let targets: Vec<Option<usize>> = (0..batch.len()).map(Some).collect();
        Ok((tape.cross_entropy(scores, &targets)?, vars))
    }

    /// In-batch negatives loss of text pairs, without training.
    pub fn in_batch_loss(&self, batch: &[(&str, &str)]) -> Result<f64> {
        let ids: Vec<(Vec<usize>, Vec<usize>)> = batch.iter().map(|(q, d)| (self.tokenize(q), self.tokenize(d))).collect();
        let refs: Vec<(&[usize], &[usize])> = ids.iter().map(|(q, d)| (q.as_slice(), d.as_slice())).collect();
        let mut tape = Tape::new();
        let (loss, _) = self.batch_loss(&mut tape, &refs)?;
        Ok(tape.value(loss).item().as_f64())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = EncoderMeta {
            config: self.config,
            vocab: self.vocab.clone(),
        };
        checkpoint::save(path, CHECKPOINT_KIND, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params): (EncoderMeta, ParamStore<S>) = checkpoint::load(path, CHECKPOINT_KIND)?;
        let shape = Self::shape(&meta.config, &meta.vocab);
        let (qp, dp) = tower_prefixes(meta.config.shared_towers);
        let query = StackLayout::resolve(&params, qp, shape)?;
        let document = StackLayout::resolve(&params, dp, shape)?;
        let mut enc = Self {
            config: meta.config,
            vocab: meta.vocab,
            params,
            query,
            document,
            fingerprint: String::new(),
        };
        enc.refresh_fingerprint();
        Ok(enc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrTrainConfig {
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for DrTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            optimizer: AdamWConfig::with_lr(1e-4),
            max_epochs: 20,
            patience: 10,
            seed: 0,
        }
    }
}

/// Mean over rows i of `-log softmax(q·dᵀ)[i][i]` for paired vector rows.
pub fn in_batch_softmax_loss<S: Scalar>(q: &Tensor<S>, d: &Tensor<S>) -> Result<S> {
    if q.shape() != d.shape() {
        return Err(Error::shape("in-batch loss", q.shape(), d.shape()));
    }
    let scores = q.matmul(&d.transpose()?)?;
    let mut tape = Tape::new();
    let x = tape.leaf(scores, false);
    let targets: Vec<Option<usize>> = (0..q.rows()).map(Some).collect();
    let loss = tape.cross_entropy(x, &targets)?;
    Ok(tape.value(loss).item())
}

/// Retrieval task scored after every epoch for model selection.
#[derive(Clone, Copy, Debug)]
pub struct EvalProbe<'a> {
    pub queries: &'a [(String, String)],
    pub corpus: &'a [(String, String)],
    pub qrels: &'a Qrels,
}

impl EvalProbe<'_> {
    pub fn ndcg10<S: Scalar>(&self, encoder: &BiEncoder<S>) -> Result<f64> {
        let emb = CorpusEmbeddings::build(encoder, self.corpus)?;
        let run = retrieve_all(encoder, &emb, self.queries, 10)?;
        Ok(ndcg_at_k(&run, self.qrels, 10)?.mean)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub probe_ndcg10: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DrReport {
    pub epochs: Vec<DrEpoch>,
    pub best_epoch: usize,
    pub best_probe_ndcg10: Option<f64>,
    pub stopped_early: bool,
    pub steps: u64,
    /// Batches of one pair, which carry no in-batch negatives.
    pub zero_loss_batches: usize,
}

/// Trains `encoder` on `(query, document)` text pairs and returns the
/// epoch with the best probe nDCG@10 (the last epoch without a probe).
pub fn train_dr<S: Scalar>(
    mut encoder: BiEncoder<S>,
    pairs: &[(String, String)],
    probe: Option<EvalProbe<'_>>,
    cfg: &DrTrainConfig,
) -> Result<(BiEncoder<S>, DrReport)> {
    if pairs.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let ids: Vec<(Vec<usize>, Vec<usize>)> = pairs
        .iter()
        .map(|(q, d)| (encoder.tokenize(q), encoder.tokenize(d)))
        .collect();
    let mut opt = AdamW::new(cfg.optimizer);
    let mut report = DrReport::default();
    let mut best: Option<(f64, ParamStore<S>)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut seed::rng(cfg.seed, "dr-epoch", epoch as u64));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() == 1 {
                log::debug!("single-pair batch contributes zero loss");
                report.zero_loss_batches += 1;
                continue;
            }
            let batch: Vec<(&[usize], &[usize])> = chunk.iter().map(|&i| (ids[i].0.as_slice(), ids[i].1.as_slice())).collect();
            let (loss, grads) = {
                let mut tape = Tape::new();
                let (loss, vars) = encoder.batch_loss(&mut tape, &batch)?;
                let mut grads = tape.backward(loss)?;
                let grads: Vec<_> = vars.iter().map(|&v| grads.take(v)).collect();
                (tape.value(loss).item().as_f64(), grads)
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("dense retriever loss at epoch {epoch}")));
            }
            if opt.step(encoder.params.iter_mut().zip(grads.iter().map(Option::as_ref))) == StepOutcome::Rejected {
                log::warn!("dense retriever step skipped");
            }
            total += loss;
            batches += 1;
        }
        encoder.refresh_fingerprint();
        let train_loss = if batches == 0 { 0.0 } else { total / batches as f64 };
        let probe_ndcg10 = probe.map(|p| p.ndcg10(&encoder)).transpose()?;
        log::info!("dr epoch {epoch}: loss {train_loss:.4}, probe nDCG@10 {probe_ndcg10:?}");
        report.epochs.push(DrEpoch {
            epoch,
            train_loss,
            probe_ndcg10,
        });
        let Some(score) = probe_ndcg10 else {
            report.best_epoch = epoch;
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, encoder.params.clone()));
            report.best_epoch = epoch;
            report.best_probe_ndcg10 = Some(score);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        encoder.params = params;
        encoder.refresh_fingerprint();
    }
    report.steps = opt.steps_taken();
    Ok((encoder, report))
}
