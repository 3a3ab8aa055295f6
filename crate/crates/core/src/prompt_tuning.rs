//! Soft-prompt tuning: initialization from a hard prompt, the
//! document/query instance template, and the training loop over θ alone.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{LabeledPair, SplitSample};
use crate::error::{Error, Result};
use crate::lm::{perplexity, DecoderLm, Vocabulary, EOS, UNK};
use crate::metrics::{read_file, write_file};
use crate::numerics::{checkpoint, AdamW, AdamWConfig, ParamStore, Parameter, Scalar, Tensor};
use crate::seed;

/// Bump when the instance layout below changes.
pub const TEMPLATE_VERSION: &str = "doc-query-v1";

pub const DEFAULT_HARD_PROMPT: &str = "please generate query for document";

/// One serialized `[examples…; target]` sequence with its loss mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuningInstance {
    pub ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub meta: InstanceMeta,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceMeta {
    /// `query_id/doc_id` of each example pair, in prompt order.
    pub examples: Vec<String>,
    pub target: String,
    /// Whether any document was cut to fit the context.
    pub truncated: bool,
}

fn pair_id(p: &LabeledPair) -> String {
    format!("{}/{}", p.query_id, p.doc_id)
}

struct Block {
    head: Vec<usize>,
    doc: Vec<usize>,
    tail: Vec<usize>,
}

fn doc_block(vocab: &Vocabulary, doc: &str) -> Block {
    Block {
        head: vocab.encode("Document:"),
        doc: vocab.encode(doc),
        tail: vocab.encode("\nQuery:"),
    }
}

/// Largest per-document token cap under which the documents fit `room`.
fn water_fill(lengths: &[usize], room: usize) -> usize {
    let total: usize = lengths.iter().sum();
    if total <= room {
        return usize::MAX;
    }
    let (mut lo, mut hi) = (0usize, lengths.iter().copied().max().unwrap_or(0));
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if lengths.iter().map(|&l| l.min(mid)).sum::<usize>() <= room {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

/// Serializes blocks whose documents share a common right-truncation cap so
/// that the result fits `budget` tokens. Queries are never cut.
fn assemble(mut blocks: Vec<(Block, Vec<usize>)>, budget: usize) -> Result<(Vec<Vec<usize>>, bool)> {
    let fixed: usize = blocks.iter().map(|(b, rest)| b.head.len() + b.tail.len() + rest.len()).sum();
    let lengths: Vec<usize> = blocks.iter().map(|(b, _)| b.doc.len()).collect();
    if fixed > budget {
        return Err(Error::Length {
            prefix: 0,
            tokens: fixed + lengths.iter().sum::<usize>(),
            limit: budget,
        });
    }
    let cap = water_fill(&lengths, budget - fixed);
    let truncated = lengths.iter().any(|&l| l > cap);
    let parts = blocks
        .iter_mut()
        .map(|(b, rest)| {
            b.doc.truncate(cap);
            let mut v = Vec::with_capacity(b.head.len() + b.doc.len() + b.tail.len() + rest.len());
            v.extend_from_slice(&b.head);
            v.extend_from_slice(&b.doc);
            v.extend_from_slice(&b.tail);
            v.extend_from_slice(rest);
            v
        })
        .collect();
    Ok((parts, truncated))
}

fn example_blocks(vocab: &Vocabulary, examples: &[LabeledPair]) -> Vec<(Block, Vec<usize>)> {
    examples
        .iter()
        .map(|e| {
            let mut rest = vocab.encode(&e.query);
            rest.extend(vocab.encode("\n"));
            (doc_block(vocab, &e.document), rest)
        })
        .collect()
}

/// `Document: {d_1}\nQuery: {q_1}\n…Document: {d}\nQuery: {q}<eos>`, with the
/// mask set on the target query tokens and the closing EOS.
///
/// `budget` is the number of positions left after the soft prompt; documents
/// are right-truncated to fit it.
pub fn build_instance(examples: &[LabeledPair], target: &LabeledPair, vocab: &Vocabulary, budget: usize) -> Result<TuningInstance> {
    let query = vocab.encode(&target.query);
    if query.is_empty() {
        return Err(Error::Contract(format!("empty target query for {}", pair_id(target))));
    }
    let mut blocks = example_blocks(vocab, examples);
    let mut rest = query.clone();
    rest.push(EOS);
    blocks.push((doc_block(vocab, &target.document), rest));
    let (parts, truncated) = assemble(blocks, budget)?;
    let ids: Vec<usize> = parts.concat();
    let mut loss_mask = vec![false; ids.len()];
    for m in &mut loss_mask[ids.len() - query.len() - 1..] {
        *m = true;
    }
    Ok(TuningInstance {
        ids,
        loss_mask,
        meta: InstanceMeta {
            examples: examples.iter().map(pair_id).collect(),
            target: pair_id(target),
            truncated,
        },
    })
}

/// The generation-time prompt: example blocks, then `Document: {doc}\nQuery:`,
/// leaving `reserve` positions free for the continuation.
pub fn build_generation_prompt(examples: &[LabeledPair], document: &str, vocab: &Vocabulary, budget: usize, reserve: usize) -> Result<Vec<usize>> {
    let mut blocks = example_blocks(vocab, examples);
    blocks.push((doc_block(vocab, document), Vec::new()));
    let room = budget.checked_sub(reserve).ok_or(Error::Length {
        prefix: 0,
        tokens: reserve,
        limit: budget,
    })?;
    Ok(assemble(blocks, room)?.0.concat())
}

/// Trainable virtual-token embeddings tied to one frozen LM.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPrompt<S> {
    pub theta: Tensor<S>,
    pub init_hard_prompt: String,
    pub init_ids: Vec<usize>,
    pub lm_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct SoftPromptMeta {
    init_hard_prompt: String,
    init_ids: Vec<usize>,
    lm_fingerprint: String,
    template: String,
}

const CHECKPOINT_KIND: &str = "soft-prompt";

impl<S: Scalar> SoftPrompt<S> {
    /// Number of virtual tokens, l_s.
    pub fn len(&self) -> usize {
        self.theta.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fails unless `lm` is the model this prompt was built for.
    pub fn check_lm(&self, lm: &DecoderLm<S>) -> Result<()> {
        let fp = lm.fingerprint();
        if fp != self.lm_fingerprint {
            return Err(Error::Stale(format!(
                "soft prompt belongs to LM {}, got {}",
                &self.lm_fingerprint[..12.min(self.lm_fingerprint.len())],
                &fp[..12]
            )));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.lm_fingerprint.as_bytes());
        for v in self.theta.data() {
            let mut buf = Vec::with_capacity(S::BYTES);
            v.write_le(&mut buf);
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = ParamStore::new();
        store.insert("theta", self.theta.clone(), true)?;
        let meta = SoftPromptMeta {
            init_hard_prompt: self.init_hard_prompt.clone(),
            init_ids: self.init_ids.clone(),
            lm_fingerprint: self.lm_fingerprint.clone(),
            template: TEMPLATE_VERSION.into(),
        };
        checkpoint::save(path, CHECKPOINT_KIND, &meta, &store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store): (SoftPromptMeta, ParamStore<S>) = checkpoint::load(path, CHECKPOINT_KIND)?;
        if meta.template != TEMPLATE_VERSION {
            return Err(Error::Stale(format!("soft prompt uses template {}", meta.template)));
        }
        let theta = store
            .get("theta")
            .ok_or_else(|| Error::Checkpoint("soft prompt without theta".into()))?
            .tensor
            .clone();
        Ok(Self {
            theta,
            init_hard_prompt: meta.init_hard_prompt,
            init_ids: meta.init_ids,
            lm_fingerprint: meta.lm_fingerprint,
        })
    }
}

/// Repeats the hard prompt's token ids cyclically to `l_s` positions and
/// copies the corresponding embedding rows.
pub fn init_soft_prompt<S: Scalar>(hard_prompt: &str, l_s: usize, lm: &DecoderLm<S>) -> Result<SoftPrompt<S>> {
    if l_s == 0 {
        return Err(Error::Config("soft prompt length must be at least 1".into()));
    }
    let ids = lm.vocab().encode(hard_prompt);
    if ids.iter().all(|&i| i == UNK) {
        return Err(Error::Config(format!("hard prompt {hard_prompt:?} has no in-vocabulary tokens")));
    }
    let init_ids: Vec<usize> = ids.iter().copied().cycle().take(l_s).collect();
    let d = lm.config().d_model;
    let mut data = Vec::with_capacity(l_s * d);
    for &id in &init_ids {
        data.extend_from_slice(lm.embedding_row(id)?);
    }
    Ok(SoftPrompt {
        theta: Tensor::new(vec![l_s, d], data)?,
        init_hard_prompt: hard_prompt.to_string(),
        init_ids,
        lm_fingerprint: lm.fingerprint(),
    })
}

/// Hyperparameters of the tuning loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningConfig {
    /// Example pairs per instance, M.
    pub examples_per_instance: usize,
    /// Virtual tokens, l_s.
    pub prompt_length: usize,
    pub hard_prompt: String,
    pub optimizer: AdamWConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            examples_per_instance: 2,
            prompt_length: 50,
            hard_prompt: DEFAULT_HARD_PROMPT.into(),
            optimizer: AdamWConfig::with_lr(3e-2),
            max_epochs: 100,
            patience: 5,
            batch_size: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean instance loss; absent for the untrained epoch 0.
    pub train_loss: Option<f64>,
    pub eval_perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_perplexity: f64,
    pub stopped_early: bool,
    pub steps: u64,
}

impl TuningReport {
    pub fn initial_perplexity(&self) -> f64 {
        self.epochs[0].eval_perplexity
    }
}

/// Evaluation instances with examples drawn per instance from the training
/// sample, seeded by instance index only, so every epoch scores the same
/// sequences.
pub fn eval_instances(s_train: &SplitSample, s_eval: &SplitSample, m: usize, vocab: &Vocabulary, budget: usize, seed: u64) -> Result<Vec<TuningInstance>> {
    s_eval
        .pairs
        .iter()
        .enumerate()
        .map(|(j, target)| {
            let mut rng = seed::rng(seed, "tune-eval", j as u64);
            let examples: Vec<LabeledPair> = index::sample(&mut rng, s_train.pairs.len(), m)
                .into_iter()
                .map(|i| s_train.pairs[i].clone())
                .collect();
            build_instance(&examples, target, vocab, budget)
        })
        .collect()
}

/// Trains θ on a frozen LM; returns the prompt from the epoch with the
/// lowest evaluation perplexity.
pub fn tune<S: Scalar>(lm: &DecoderLm<S>, s_train: &SplitSample, s_eval: &SplitSample, cfg: &TuningConfig) -> Result<(SoftPrompt<S>, TuningReport)> {
    if !lm.is_frozen() {
        return Err(Error::Contract("prompt tuning requires every LM parameter frozen".into()));
    }
    let m = cfg.examples_per_instance;
    if s_train.num_pairs() <= m {
        return Err(Error::Config(format!(
            "{} training pairs leave nothing to train on with M = {m}",
            s_train.num_pairs()
        )));
    }
    if s_eval.pairs.is_empty() {
        return Err(Error::Config("evaluation sample is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let sp = init_soft_prompt(&cfg.hard_prompt, cfg.prompt_length, lm)?;
    let vocab = lm.vocab();
    let budget = lm
        .config()
        .context_length
        .checked_sub(cfg.prompt_length)
        .filter(|&b| b > 0)
        .ok_or_else(|| Error::Config("soft prompt fills the whole context".into()))?;
    let eval = eval_instances(s_train, s_eval, m, vocab, budget, cfg.seed)?;

    let mut theta = Parameter {
        name: "theta".into(),
        tensor: sp.theta.clone(),
        trainable: true,
    };
    let mut opt = AdamW::new(cfg.optimizer);
    let initial = perplexity(lm, Some(&theta.tensor), &eval)?;
    log::info!("tune epoch 0: eval perplexity {initial:.3}");
    let mut report = TuningReport {
        epochs: vec![EpochRecord {
            epoch: 0,
            train_loss: None,
            eval_perplexity: initial,
        }],
        best_epoch: 0,
        best_perplexity: initial,
        stopped_early: false,
        steps: 0,
    };
    let mut best = theta.tensor.clone();
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut rng = seed::rng(cfg.seed, "tune-epoch", epoch as u64);
        let chosen = index::sample(&mut rng, s_train.pairs.len(), m).into_vec();
        let examples: Vec<LabeledPair> = chosen.iter().map(|&i| s_train.pairs[i].clone()).collect();
        let mut rest: Vec<usize> = (0..s_train.pairs.len()).filter(|i| !chosen.contains(i)).collect();
        rest.shuffle(&mut rng);
        let instances = rest
            .iter()
            .map(|&i| build_instance(&examples, &s_train.pairs[i], vocab, budget))
            .collect::<Result<Vec<_>>>()?;
        let mut total = 0.0;
        for batch in instances.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|inst| lm.loss_and_prefix_grad(&theta.tensor, &inst.ids, &inst.loss_mask))
                .collect::<Result<Vec<_>>>()?;
            let mut grad = Tensor::zeros(theta.tensor.shape());
            for (loss, g) in &results {
                total += loss.as_f64();
                grad.add_assign(g);
            }
            let inv = S::lit(1.0 / batch.len() as f64);
            let grad = grad.map(|v| v * inv);
            opt.step([(&mut theta, Some(&grad))]);
        }
        let train_loss = total / instances.len() as f64;
        let ppl = perplexity(lm, Some(&theta.tensor), &eval)?;
        log::info!("tune epoch {epoch}: train loss {train_loss:.4}, eval perplexity {ppl:.3}");
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: Some(train_loss),
            eval_perplexity: ppl,
        });
        if ppl < report.best_perplexity {
            report.best_perplexity = ppl;
            report.best_epoch = epoch;
            best = theta.tensor.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    report.steps = opt.steps_taken();
    Ok((SoftPrompt { theta: best, ..sp }, report))
}

/// Headerless CSV, one row per virtual token: index then the embedding.
pub fn export_prompt_embeddings<S: Scalar>(sp: &SoftPrompt<S>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..sp.theta.rows() {
        let _ = write!(out, "{i}");
        for v in sp.theta.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

/// Parses a file written by [`export_prompt_embeddings`].
pub fn read_prompt_embeddings(path: &Path) -> Result<Tensor<f64>> {
    let text = read_file(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = line
            .split(',')
            .skip(1)
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        rows.push(row);
    }
    Ok(Tensor::from_rows(&rows))
}

#[cfg(test)]
#[path = "prompt_tuning_tests.rs"]
mod tests;
