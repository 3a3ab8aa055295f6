//! Pre-norm transformer stack shared by the causal LM and the retrieval towers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::PAD;
use crate::numerics::{ParamStore, Scalar, Tape, Tensor, Var};

/// Shape of a transformer stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackShape {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl StackShape {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.max_positions == 0 || self.vocab_size == 0 {
            return Err(Error::Config("context length and vocabulary must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BlockSlots {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Positions of a stack's parameters inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct StackLayout {
    pub shape: StackShape,
    pub tok_emb: usize,
    prev_emb: usize,
    pos_emb: usize,
    blocks: Vec<BlockSlots>,
    lnf_g: usize,
    lnf_b: usize,
}

impl StackLayout {
    /// Resolves parameter names under `prefix` in an existing store.
    pub fn resolve<S: Scalar>(store: &ParamStore<S>, prefix: &str, shape: StackShape) -> Result<Self> {
        let find = |name: String| {
            store
                .position(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let blocks = (0..shape.num_layers)
            .map(|i| {
                let p = |n: &str| find(format!("{prefix}blocks.{i}.{n}"));
                Ok(BlockSlots {
                    ln1_g: p("ln1.g")?,
                    ln1_b: p("ln1.b")?,
                    wq: p("attn.wq")?,
                    bq: p("attn.bq")?,
                    wk: p("attn.wk")?,
                    bk: p("attn.bk")?,
                    wv: p("attn.wv")?,
                    bv: p("attn.bv")?,
                    wo: p("attn.wo")?,
                    bo: p("attn.bo")?,
                    ln2_g: p("ln2.g")?,
                    ln2_b: p("ln2.b")?,
                    w1: p("mlp.w1")?,
                    b1: p("mlp.b1")?,
                    w2: p("mlp.w2")?,
                    b2: p("mlp.b2")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let layout = Self {
            shape,
            tok_emb: find(format!("{prefix}tok_emb"))?,
            prev_emb: find(format!("{prefix}prev_emb"))?,
            pos_emb: find(format!("{prefix}pos_emb"))?,
            blocks,
            lnf_g: find(format!("{prefix}ln_f.g"))?,
            lnf_b: find(format!("{prefix}ln_f.b"))?,
        };
        let tok = store.iter().nth(layout.tok_emb).unwrap().tensor.shape();
        if tok != [shape.vocab_size, shape.d_model] {
            return Err(Error::Checkpoint(format!("token embedding shape {tok:?} disagrees with config")));
        }
        Ok(layout)
    }
}

/// Adds freshly initialized stack parameters under `prefix`.
///
/// Every token row also receives an embedding of the token before it
/// (`prev_emb`, with PAD standing in at the start of the token run), which
/// lets a single attention layer match on bigrams.
///
/// Weights are N(0, 0.02²); residual output projections are further scaled
/// by 1/sqrt(2·layers). Norm gains start at one, biases at zero.
pub fn init_stack<S: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    prefix: &str,
    shape: StackShape,
    rng: &mut R,
) -> Result<StackLayout> {
    shape.validate()?;
    let d = shape.d_model;
    let std = 0.02;
    let resid_std = std / (2.0 * shape.num_layers.max(1) as f64).sqrt();
    store.insert(format!("{prefix}tok_emb"), Tensor::randn(&[shape.vocab_size, d], std, rng), true)?;
    store.insert(format!("{prefix}prev_emb"), Tensor::randn(&[shape.vocab_size, d], std, rng), true)?;
    store.insert(format!("{prefix}pos_emb"), Tensor::randn(&[shape.max_positions, d], std, rng), true)?;
    for i in 0..shape.num_layers {
        let p = |n: &str| format!("{prefix}blocks.{i}.{n}");
        store.insert(p("ln1.g"), Tensor::full(&[d], S::one()), true)?;
        store.insert(p("ln1.b"), Tensor::zeros(&[d]), true)?;
        for (w, b) in [("attn.wq", "attn.bq"), ("attn.wk", "attn.bk"), ("attn.wv", "attn.bv")] {
            store.insert(p(w), Tensor::randn(&[d, d], std, rng), true)?;
            store.insert(p(b), Tensor::zeros(&[d]), true)?;
        }
        store.insert(p("attn.wo"), Tensor::randn(&[d, d], resid_std, rng), true)?;
        store.insert(p("attn.bo"), Tensor::zeros(&[d]), true)?;
        store.insert(p("ln2.g"), Tensor::full(&[d], S::one()), true)?;
        store.insert(p("ln2.b"), Tensor::zeros(&[d]), true)?;
        store.insert(p("mlp.w1"), Tensor::randn(&[d, 4 * d], std, rng), true)?;
        store.insert(p("mlp.b1"), Tensor::zeros(&[4 * d]), true)?;
        store.insert(p("mlp.w2"), Tensor::randn(&[4 * d, d], resid_std, rng), true)?;
        store.insert(p("mlp.b2"), Tensor::zeros(&[d]), true)?;
    }
    store.insert(format!("{prefix}ln_f.g"), Tensor::full(&[d], S::one()), true)?;
    store.insert(format!("{prefix}ln_f.b"), Tensor::zeros(&[d]), true)?;
    StackLayout::resolve(store, prefix, shape)
}

/// Records every parameter of `store` as a tape leaf. Only trainable
/// parameters request gradients, and only when `track` is set.
pub fn bind<'a, S: Scalar>(tape: &mut Tape<'a, S>, store: &'a ParamStore<S>, track: bool) -> Vec<Var> {
    store
        .iter()
        .map(|p| tape.leaf_ref(&p.tensor, track && p.trainable))
        .collect()
}

/// Embeds `ids` (after an optional `p×d` prefix), adds positions starting
/// at `offset`, and runs the blocks plus the final norm. Returns the
/// `(p+n)×d` hidden states.
pub fn run_stack<S: Scalar>(
    tape: &mut Tape<'_, S>,
    vars: &[Var],
    layout: &StackLayout,
    prefix: Option<Var>,
    ids: &[usize],
    causal: bool,
    offset: usize,
) -> Result<Var> {
    let shape = layout.shape;
    let p = prefix.map_or(0, |v| tape.value(v).rows());
    let total = p + ids.len();
    if offset + total > shape.max_positions {
        return Err(Error::Length {
            prefix: p,
            tokens: ids.len(),
            limit: shape.max_positions,
        });
    }
    if total == 0 {
        return Err(Error::Contract("empty input sequence".into()));
    }
    if let Some(pv) = prefix {
        if tape.value(pv).cols() != shape.d_model {
            return Err(Error::shape("prefix", tape.value(pv).shape(), &[p, shape.d_model]));
        }
    }
    let mut parts = Vec::with_capacity(2);
    parts.extend(prefix);
    if !ids.is_empty() {
        let tok = tape.embedding(vars[layout.tok_emb], ids)?;
        let prev = tape.embedding(vars[layout.prev_emb], &previous_ids(None, ids))?;
        parts.push(tape.add(tok, prev)?);
    }
    let x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
    let positions: Vec<usize> = (offset..offset + total).collect();
    let pos = tape.embedding(vars[layout.pos_emb], &positions)?;
    let mut h = tape.add(x, pos)?;
    for b in &layout.blocks {
        let a = tape.layer_norm(h, vars[b.ln1_g], vars[b.ln1_b])?;
        let q = linear(tape, a, vars[b.wq], vars[b.bq])?;
        let k = linear(tape, a, vars[b.wk], vars[b.bk])?;
        let v = linear(tape, a, vars[b.wv], vars[b.bv])?;
        let att = tape.attention(q, k, v, shape.num_heads, causal)?;
        let o = linear(tape, att, vars[b.wo], vars[b.bo])?;
        h = tape.add(h, o)?;
        let m = tape.layer_norm(h, vars[b.ln2_g], vars[b.ln2_b])?;
        let up = linear(tape, m, vars[b.w1], vars[b.b1])?;
        let act = tape.gelu(up)?;
        let down = linear(tape, act, vars[b.w2], vars[b.b2])?;
        h = tape.add(h, down)?;
    }
    tape.layer_norm(h, vars[layout.lnf_g], vars[layout.lnf_b])
}

/// The id preceding each of `ids`; `before` is the token ahead of the run.
fn previous_ids(before: Option<usize>, ids: &[usize]) -> Vec<usize> {
    std::iter::once(before.unwrap_or(PAD))
        .chain(ids.iter().copied())
        .take(ids.len())
        .collect()
}

pub fn linear<S: Scalar>(tape: &mut Tape<'_, S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Per-layer keys and values of every position seen so far, for
/// incremental decoding without re-running the prefix.
#[derive(Clone, Debug, Default)]
pub struct KvCache<S> {
    layers: Vec<(Vec<S>, Vec<S>)>,
    len: usize,
    /// The final cached position's token, if it was a token.
    last_id: Option<usize>,
}

impl<S> KvCache<S> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn norm_rows<S: Scalar>(x: &Tensor<S>, g: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let cols = x.cols();
    let n = S::lit(cols as f64);
    let eps = S::lit(crate::numerics::tape::LN_EPS);
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<S>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let rs = (var + eps).sqrt().recip();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[c] - mean) * rs * g.data()[c] + b.data()[c];
        }
    }
    out
}

fn affine<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let mut y = x.matmul(w)?;
    let cols = y.cols();
    for r in 0..y.rows() {
        for (v, &bb) in y.row_mut(r).iter_mut().zip(&b.data()[..cols]) {
            *v += bb;
        }
    }
    Ok(y)
}

/// Causal forward pass of new rows against a cache of earlier positions.
/// Returns the final-norm hidden states of the new rows only.
pub fn run_stack_cached<S: Scalar>(
    store: &ParamStore<S>,
    layout: &StackLayout,
    cache: &mut KvCache<S>,
    prefix: Option<&Tensor<S>>,
    ids: &[usize],
) -> Result<Tensor<S>> {
    let shape = layout.shape;
    let d = shape.d_model;
    let t = |i: usize| &store.at(i).tensor;
    let p = prefix.map_or(0, Tensor::rows);
    let n = p + ids.len();
    let start = cache.len;
    if start + n > shape.max_positions {
        return Err(Error::Length {
            prefix: start + p,
            tokens: ids.len(),
            limit: shape.max_positions,
        });
    }
    if n == 0 {
        return Err(Error::Contract("empty input sequence".into()));
    }
    let (tok, prev, pos) = (t(layout.tok_emb), t(layout.prev_emb), t(layout.pos_emb));
    let mut rows = Vec::with_capacity(n * d);
    if let Some(pre) = prefix {
        if pre.cols() != d {
            return Err(Error::shape("prefix", pre.shape(), &[p, d]));
        }
        rows.extend_from_slice(pre.data());
    }
    let before = if p > 0 { None } else { cache.last_id };
    for (&id, pid) in ids.iter().zip(previous_ids(before, ids)) {
        if id >= tok.rows() {
            return Err(Error::Index {
                what: "vocabulary",
                index: id,
                bound: tok.rows(),
            });
        }
        rows.extend(tok.row(id).iter().zip(prev.row(pid)).map(|(&a, &b)| a + b));
    }
    let mut h = Tensor::new(vec![n, d], rows)?;
    for i in 0..n {
        for (v, &e) in h.row_mut(i).iter_mut().zip(pos.row(start + i)) {
            *v += e;
        }
    }
    if cache.layers.is_empty() {
        cache.layers = vec![(Vec::new(), Vec::new()); layout.blocks.len()];
    }
    let heads = shape.num_heads;
    let dh = d / heads;
    let scale = S::lit(1.0 / (dh as f64).sqrt());
    let c = S::lit(crate::numerics::tape::GELU_C);
    for (b, (keys, values)) in layout.blocks.iter().zip(cache.layers.iter_mut()) {
        let a = norm_rows(&h, t(b.ln1_g), t(b.ln1_b));
        let q = affine(&a, t(b.wq), t(b.bq))?;
        keys.extend_from_slice(affine(&a, t(b.wk), t(b.bk))?.data());
        values.extend_from_slice(affine(&a, t(b.wv), t(b.bv))?.data());
        let mut att = Tensor::zeros(&[n, d]);
        let mut scores = vec![S::zero(); start + n];
        for i in 0..n {
            let visible = start + i + 1;
            for hd in 0..heads {
                let off = hd * dh;
                let qi = &q.row(i)[off..off + dh];
                let mut max = S::neg_infinity();
                for (j, s) in scores[..visible].iter_mut().enumerate() {
                    let kj = &keys[j * d + off..j * d + off + dh];
                    *s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<S>() * scale;
                    max = max.max(*s);
                }
                let mut z = S::zero();
                for s in scores[..visible].iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let o = &mut att.row_mut(i)[off..off + dh];
                for (j, &s) in scores[..visible].iter().enumerate() {
                    let w = s / z;
                    for (ot, &vt) in o.iter_mut().zip(&values[j * d + off..j * d + off + dh]) {
                        *ot += w * vt;
                    }
                }
            }
        }
        h.add_assign(&affine(&att, t(b.wo), t(b.bo))?);
        let m = norm_rows(&h, t(b.ln2_g), t(b.ln2_b));
        let up = affine(&m, t(b.w1), t(b.b1))?.map(|v| {
            S::lit(0.5) * v * (S::one() + (c * (v + S::lit(0.044715) * v * v * v)).tanh())
        });
        h.add_assign(&affine(&up, t(b.w2), t(b.b2))?);
    }
    cache.len += n;
    cache.last_id = ids.last().copied();
    Ok(norm_rows(&h, t(layout.lnf_g), t(layout.lnf_b)))
}
