use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::{self, KvCache, StackLayout, StackShape};
use crate::numerics::{checkpoint, ParamStore, Scalar, Tape, Tensor, Var};

/// Architecture of the causal LM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub context_length: usize,
    /// Filled from the vocabulary at construction when zero.
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            d_model: 128,
            num_heads: 4,
            context_length: 512,
            vocab_size: 0,
            tie_embeddings: false,
        }
    }
}

impl LmConfig {
    fn stack(&self) -> StackShape {
        StackShape {
            num_layers: self.num_layers,
            d_model: self.d_model,
            num_heads: self.num_heads,
            max_positions: self.context_length,
            vocab_size: self.vocab_size,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct LmMeta {
    config: LmConfig,
    vocab: Vocabulary,
    final_train_loss: Option<f64>,
}

const CHECKPOINT_KIND: &str = "decoder-lm";

/// Tiny decoder-only transformer whose input may be preceded by free
/// embedding rows (a soft prompt).
#[derive(Clone, Debug)]
pub struct DecoderLm<S> {
    config: LmConfig,
    vocab: Vocabulary,
    params: ParamStore<S>,
    layout: StackLayout,
    head: Option<(usize, usize)>,
    pub(crate) final_train_loss: Option<f64>,
}

/// Cached keys and values of an in-progress decode.
#[derive(Clone, Debug)]
pub struct DecoderState<S> {
    cache: KvCache<S>,
}

impl<S> DecoderState<S> {
    /// Positions consumed so far, prefix rows included.
    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }
}

/// Which rows of the hidden states get projected to logits.
#[derive(Clone, Copy, Debug)]
pub(crate) enum HeadRows<'r> {
    All,
    Only(&'r [usize]),
}

impl<S: Scalar> DecoderLm<S> {
    pub fn new(mut config: LmConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if config.vocab_size == 0 {
            config.vocab_size = vocab.len();
        }
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {} disagrees with vocabulary of {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = nn::init_stack(&mut params, "", config.stack(), &mut rng)?;
        let head = if config.tie_embeddings {
            None
        } else {
            let w = params.insert("lm_head.w", Tensor::randn(&[config.d_model, config.vocab_size], 0.02, &mut rng), true)?;
            let b = params.insert("lm_head.b", Tensor::zeros(&[config.vocab_size]), true)?;
            Some((w, b))
        };
        Ok(Self {
            config,
            vocab,
            params,
            layout,
            head,
            final_train_loss: None,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.final_train_loss
    }

    /// Marks every parameter frozen.
    pub fn freeze(&mut self) {
        self.params.set_trainable(false);
    }

    pub fn unfreeze(&mut self) {
        self.params.set_trainable(true);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.trainable)
    }

    /// Token-embedding row of `id`.
    pub fn embedding_row(&self, id: usize) -> Result<&[S]> {
        let table = &self.params.at(self.layout.tok_emb).tensor;
        if id >= table.rows() {
            return Err(Error::Index {
                what: "vocabulary",
                index: id,
                bound: table.rows(),
            });
        }
        Ok(table.row(id))
    }

    /// Hash of architecture, vocabulary, and every weight.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).unwrap_or_default());
        h.update(self.vocab.fingerprint().as_bytes());
        h.update(self.params.fingerprint().as_bytes());
        hex::encode(h.finalize())
    }

    /// Records the forward pass; returns the logits var and the parameter vars.
    pub(crate) fn record<'a>(
        &'a self,
        tape: &mut Tape<'a, S>,
        prefix: Option<Var>,
        ids: &[usize],
        track_params: bool,
        rows: HeadRows<'_>,
        offset: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let vars = nn::bind(tape, &self.params, track_params);
        let hidden = nn::run_stack(tape, &vars, &self.layout, prefix, ids, true, offset)?;
        let hidden = match rows {
            HeadRows::All => hidden,
            HeadRows::Only(r) => tape.embedding(hidden, r)?,
        };
        let logits = match self.head {
            Some((w, b)) => nn::linear(tape, hidden, vars[w], vars[b])?,
            None => {
                let table_t = tape.transpose(vars[self.layout.tok_emb])?;
                tape.matmul(hidden, table_t)?
            }
        };
        Ok((logits, vars))
    }

    /// Logits for every position of `[prefix; ids]`; row i predicts position i+1.
    pub fn forward(&self, prefix: Option<&Tensor<S>>, ids: &[usize]) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let pv = prefix.filter(|p| p.rows() > 0).map(|p| tape.leaf_ref(p, false));
        let (logits, _) = self.record(&mut tape, pv, ids, false, HeadRows::All, 0)?;
        Ok(tape.value(logits).clone())
    }

    /// Logits at the final position only.
    pub fn next_token_logits(&self, prefix: Option<&Tensor<S>>, ids: &[usize]) -> Result<Vec<S>> {
        let mut tape = Tape::new();
        let pv = prefix.filter(|p| p.rows() > 0).map(|p| tape.leaf_ref(p, false));
        let p = pv.map_or(0, |v| tape.value(v).rows());
        let last = [p + ids.len() - 1];
        let (logits, _) = self.record(&mut tape, pv, ids, false, HeadRows::Only(&last), 0)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Empty incremental-decoding state.
    pub fn start_state(&self) -> DecoderState<S> {
        DecoderState { cache: KvCache::default() }
    }

    /// Appends `[prefix; ids]` to the state and returns the logits that
    /// predict the next token. Matches [`Self::forward`] up to rounding.
    pub fn extend(&self, state: &mut DecoderState<S>, prefix: Option<&Tensor<S>>, ids: &[usize]) -> Result<Vec<S>> {
        let prefix = prefix.filter(|p| p.rows() > 0);
        let hidden = nn::run_stack_cached(&self.params, &self.layout, &mut state.cache, prefix, ids)?;
        let last = Tensor::new(vec![1, hidden.cols()], hidden.row(hidden.rows() - 1).to_vec())?;
        let logits = match self.head {
            Some((w, b)) => {
                let mut y = last.matmul(&self.params.at(w).tensor)?;
                for (v, &bb) in y.data_mut().iter_mut().zip(self.params.at(b).tensor.data()) {
                    *v += bb;
                }
                y
            }
            None => {
                let table = &self.params.at(self.layout.tok_emb).tensor;
                let mut y = vec![S::zero(); table.rows()];
                for (v, row) in y.iter_mut().enumerate() {
                    *row = table.row(v).iter().zip(last.data()).map(|(&a, &b)| a * b).sum();
                }
                Tensor::new(vec![1, table.rows()], y)?
            }
        };
        Ok(logits.into_data())
    }

    /// Hidden-state rows whose logits predict the masked tokens, with their targets.
    pub(crate) fn targets(prefix_len: usize, ids: &[usize], mask: &[bool]) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
        if mask.len() != ids.len() {
            return Err(Error::shape("loss_mask", &[mask.len()], &[ids.len()]));
        }
        if mask.first() == Some(&true) {
            return Err(Error::Contract("loss mask may not select position 0".into()));
        }
        let (rows, targets): (Vec<usize>, Vec<Option<usize>>) = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (prefix_len + i - 1, Some(ids[i])))
            .unzip();
        if rows.is_empty() {
            return Err(Error::Contract("loss mask selects no positions".into()));
        }
        Ok((rows, targets))
    }

    /// Mean next-token negative log-likelihood over masked positions.
    pub fn lm_loss(&self, prefix: Option<&Tensor<S>>, ids: &[usize], mask: &[bool]) -> Result<S> {
        let mut tape = Tape::new();
        let pv = prefix.filter(|p| p.rows() > 0).map(|p| tape.leaf_ref(p, false));
        let p = pv.map_or(0, |v| tape.value(v).rows());
        let (rows, targets) = Self::targets(p, ids, mask)?;
        let (logits, _) = self.record(&mut tape, pv, ids, false, HeadRows::Only(&rows), 0)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        Ok(tape.value(loss).item())
    }

    /// Summed NLL and the number of masked tokens, for pooled perplexity.
    pub fn masked_nll(&self, prefix: Option<&Tensor<S>>, ids: &[usize], mask: &[bool]) -> Result<(f64, usize)> {
        let count = mask.iter().filter(|&&m| m).count();
        let mean = self.lm_loss(prefix, ids, mask)?;
        Ok((mean.as_f64() * count as f64, count))
    }

    /// Loss and its gradient with respect to the prefix embeddings.
    /// Model weights are not differentiated.
    pub fn loss_and_prefix_grad(&self, prefix: &Tensor<S>, ids: &[usize], mask: &[bool]) -> Result<(S, Tensor<S>)> {
        let mut tape = Tape::new();
        let pv = tape.leaf_ref(prefix, true);
        let (rows, targets) = Self::targets(prefix.rows(), ids, mask)?;
        let (logits, _) = self.record(&mut tape, Some(pv), ids, false, HeadRows::Only(&rows), 0)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        let mut grads = tape.backward(loss)?;
        let g = grads.take(pv).unwrap_or_else(|| Tensor::zeros(prefix.shape()));
        Ok((tape.value(loss).item(), g))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = LmMeta {
            config: self.config,
            vocab: self.vocab.clone(),
            final_train_loss: self.final_train_loss,
        };
        checkpoint::save(path, CHECKPOINT_KIND, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params): (LmMeta, ParamStore<S>) = checkpoint::load(path, CHECKPOINT_KIND)?;
        Self::from_parts(meta, params)
    }

    fn from_parts(meta: LmMeta, params: ParamStore<S>) -> Result<Self> {
        let layout = StackLayout::resolve(&params, "", meta.config.stack())?;
        let head = match (meta.config.tie_embeddings, params.position("lm_head.w"), params.position("lm_head.b")) {
            (true, _, _) => None,
            (false, Some(w), Some(b)) => Some((w, b)),
            _ => return Err(Error::Checkpoint("untied model without lm_head".into())),
        };
        Ok(Self {
            config: meta.config,
            vocab: meta.vocab,
            params,
            layout,
            head,
            final_train_loss: meta.final_train_loss,
        })
    }

    /// Same architecture and weights in another precision.
    pub fn cast<T: Scalar>(&self) -> DecoderLm<T> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params.insert(p.name.clone(), p.tensor.cast(), p.trainable).expect("unique names");
        }
        DecoderLm {
            config: self.config,
            vocab: self.vocab.clone(),
            params,
            layout: self.layout.clone(),
            head: self.head,
            final_train_loss: self.final_train_loss,
        }
    }
}
