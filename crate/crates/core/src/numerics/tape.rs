//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to compute the vector-Jacobian product later. `backward` walks the
//! list once in reverse, so each node is visited exactly once and gradients
//! are deterministic for a given forward.

use std::borrow::Cow;

use super::tensor::gemm_acc;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddBias(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        probs: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<S>,
        count: usize,
    },
    MeanRows(Var),
    Sum(Var),
}

struct Node<'a, S: Scalar> {
    value: Cow<'a, Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
///
/// Leaves may borrow their values (model weights) for the tape's lifetime,
/// so inference does not copy parameters.
pub struct Tape<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<S: Scalar> Default for Tape<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, S: Scalar> Tape<'a, S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Owned leaf.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf borrowing its value; used for model parameters.
    pub fn leaf_ref(&mut self, value: &'a Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.value(v).shape();
        if shape.len() != 2 {
            return Err(Error::shape(op, shape, &[]));
        }
        Ok((shape[0], shape[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push("scale", out, Op::Scale(x, factor), &[x])
    }

    /// Adds a length-`cols` bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let cols = vx.cols();
        if vb.numel() != cols {
            return Err(Error::shape("add_bias", vx.shape(), vb.shape()));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        self.push("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = S::lit(GELU_C);
        let k = S::lit(0.044715);
        let half = S::lit(0.5);
        let out = self
            .value(x)
            .map(|v| half * v * (S::one() + (c * (v + k * v * v * v)).tanh()));
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, cols) = (vx.rows(), vx.cols());
        if vg.numel() != cols || vb.numel() != cols {
            return Err(Error::shape("layer_norm", vx.shape(), vg.shape()));
        }
        let n = S::lit(cols as f64);
        let eps = S::lit(LN_EPS);
        let mut xhat = vec![S::zero(); rows * cols];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Gathers rows of a `V×d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (vocab, d) = (vt.rows(), vt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(vt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != cols {
                return Err(Error::shape("concat_rows", self.value(first).shape(), vp.shape()));
            }
            rows += vp.rows();
            data.extend_from_slice(vp.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        if start > end || end > vx.rows() {
            return Err(Error::Index {
                what: "row slice",
                index: end,
                bound: vx.rows(),
            });
        }
        let cols = vx.cols();
        let out = Tensor::new(vec![end - start, cols], vx.data()[start * cols..end * cols].to_vec())?;
        self.push("slice_rows", out, Op::SliceRows { x, start }, &[x])
    }

    /// Multi-head scaled dot-product attention over `n×d` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (n, d) = self.mat_dims(q, "attention")?;
        for other in [k, v] {
            if self.value(other).shape() != [n, d] {
                return Err(Error::shape("attention", &[n, d], self.value(other).shape()));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{d} dims not divisible into {heads} heads")));
        }
        let dh = d / heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![S::zero(); heads * n * n];
        let mut out = vec![S::zero(); n * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let jmax = if causal { i + 1 } else { n };
                let p = &mut probs[(h * n + i) * n..(h * n + i) * n + n];
                let qi = &vq[i * d + off..i * d + off + dh];
                let mut max = S::neg_infinity();
                for j in 0..jmax {
                    let kj = &vk[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<S>() * scale;
                    p[j] = s;
                    max = max.max(s);
                }
                let mut z = S::zero();
                for pj in p[..jmax].iter_mut() {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                let o = &mut out[i * d + off..i * d + off + dh];
                for (j, pj) in p[..jmax].iter_mut().enumerate() {
                    *pj /= z;
                    let vj = &vv[j * d + off..j * d + off + dh];
                    for (ot, &vt) in o.iter_mut().zip(vj) {
                        *ot += *pj * vt;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        self.push(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Mean negative log-likelihood over rows that carry a target.
    ///
    /// Each scored row contributes `logsumexp(row) - row[target]`, evaluated
    /// after subtracting the row maximum.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, vocab) = (vl.rows(), vl.cols());
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", vl.shape(), &[targets.len()]));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy with no target rows".into()));
        }
        let mut probs = vec![S::zero(); rows * vocab];
        let mut total = S::zero();
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= vocab {
                return Err(Error::Index {
                    what: "cross-entropy target",
                    index: t,
                    bound: vocab,
                });
            }
            let row = vl.row(r);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut z = S::zero();
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - max).exp();
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            total += z.ln() + max - row[t];
        }
        let loss = total / S::lit(count as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Column means: `n×d` to `1×d`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        if rows == 0 {
            return Err(Error::Contract("mean of zero rows".into()));
        }
        let mut out = vec![S::zero(); cols];
        for r in 0..rows {
            for (o, &v) in out.iter_mut().zip(vx.row(r)) {
                *o += v;
            }
        }
        let inv = S::lit(1.0 / rows as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let out = Tensor::new(vec![1, cols], out)?;
        self.push("mean_rows", out, Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>> {
        let out_value = self.value(output);
        if out_value.numel() != 1 {
            return Err(Error::shape("backward", out_value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out_value.shape(), S::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<'a, S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.wants(a) {
                    // dA = dC · Bᵀ
                    let da = slot(grads, a, va.shape());
                    gemm_acc(m, n, k, g.data(), false, vb.data(), true, da.data_mut());
                }
                if self.wants(b) {
                    // dB = Aᵀ · dC
                    let db = slot(grads, b, vb.shape());
                    gemm_acc(k, m, n, va.data(), true, g.data(), false, db.data_mut());
                }
            }
            &Op::Transpose(x) => {
                if self.wants(x) {
                    let gt = g.transpose().expect("2-D gradient");
                    slot(grads, x, self.value(x).shape()).add_assign(&gt);
                }
            }
            &Op::Add(a, b) => {
                for x in [a, b] {
                    if self.wants(x) {
                        slot(grads, x, g.shape()).add_assign(g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (x, other) in [(a, b), (b, a)] {
                    if self.wants(x) {
                        let vo = self.value(other);
                        let gx = slot(grads, x, g.shape());
                        for ((o, &gv), &ov) in gx.data_mut().iter_mut().zip(g.data()).zip(vo.data()) {
                            *o += gv * ov;
                        }
                    }
                }
            }
            &Op::Scale(x, factor) => {
                if self.wants(x) {
                    let gx = slot(grads, x, g.shape());
                    for (o, &gv) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += gv * factor;
                    }
                }
            }
            &Op::AddBias(x, bias) => {
                if self.wants(x) {
                    slot(grads, x, g.shape()).add_assign(g);
                }
                if self.wants(bias) {
                    let vb = self.value(bias);
                    let cols = vb.numel();
                    let gb = slot(grads, bias, vb.shape());
                    for row in g.data().chunks(cols) {
                        for (o, &gv) in gb.data_mut().iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if self.wants(x) {
                    let c = S::lit(GELU_C);
                    let k = S::lit(0.044715);
                    let half = S::lit(0.5);
                    let three = S::lit(3.0);
                    let vx = self.value(x);
                    let gx = slot(grads, x, g.shape());
                    for ((o, &gv), &v) in gx.data_mut().iter_mut().zip(g.data()).zip(vx.data()) {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let dt = (S::one() - t * t) * c * (S::one() + three * k * v * v);
                        *o += gv * (half * (S::one() + t) + half * v * dt);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let vg = self.value(*gamma);
                let cols = vg.numel();
                let rows = rstd.len();
                if self.wants(*gamma) {
                    let gg = slot(grads, *gamma, vg.shape());
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data_mut()[c] += g.data()[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = slot(grads, *beta, self.value(*beta).shape());
                    for row in g.data().chunks(cols) {
                        for (o, &gv) in gb.data_mut().iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
                if self.wants(*x) {
                    let n = S::lit(cols as f64);
                    let gx = slot(grads, *x, g.shape());
                    let mut dxhat = vec![S::zero(); cols];
                    for r in 0..rows {
                        let mut mean_d = S::zero();
                        let mut mean_dx = S::zero();
                        for c in 0..cols {
                            let d = g.data()[r * cols + c] * vg.data()[c];
                            dxhat[c] = d;
                            mean_d += d;
                            mean_dx += d * xhat[r * cols + c];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for c in 0..cols {
                            gx.data_mut()[r * cols + c] +=
                                rstd[r] * (dxhat[c] - mean_d - xhat[r * cols + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let vt = self.value(*table);
                    let d = vt.cols();
                    let gt = slot(grads, *table, vt.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g.data()[r * d..(r + 1) * d];
                        for (o, &gv) in gt.row_mut(id).iter_mut().zip(src) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let len = vp.numel();
                    if self.wants(p) {
                        let gp = slot(grads, p, vp.shape());
                        for (o, &gv) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                            *o += gv;
                        }
                    }
                    offset += len;
                }
            }
            &Op::SliceRows { x, start } => {
                if self.wants(x) {
                    let vx = self.value(x);
                    let cols = vx.cols();
                    let gx = slot(grads, x, vx.shape());
                    let dst = &mut gx.data_mut()[start * cols..start * cols + g.numel()];
                    for (o, &gv) in dst.iter_mut().zip(g.data()) {
                        *o += gv;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, *causal, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let vl = self.value(*logits);
                    let vocab = vl.cols();
                    let upstream = g.item() / S::lit(*count as f64);
                    let gl = slot(grads, *logits, vl.shape());
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        let dst = gl.row_mut(r);
                        for (o, &p) in dst.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *o += upstream * p;
                        }
                        dst[t] -= upstream;
                    }
                }
            }
            &Op::MeanRows(x) => {
                if self.wants(x) {
                    let vx = self.value(x);
                    let inv = S::lit(1.0 / vx.rows() as f64);
                    let gx = slot(grads, x, vx.shape());
                    let cols = g.numel();
                    for row in gx.data_mut().chunks_mut(cols) {
                        for (o, &gv) in row.iter_mut().zip(g.data()) {
                            *o += gv * inv;
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if self.wants(x) {
                    let gv = g.item();
                    let gx = slot(grads, x, self.value(x).shape());
                    gx.data_mut().iter_mut().for_each(|o| *o += gv);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        probs: &[S],
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let (n, d) = (g.shape()[0], g.shape()[1]);
        let dh = d / heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![S::zero(); n * d];
        let mut dk = vec![S::zero(); n * d];
        let mut dv = vec![S::zero(); n * d];
        let mut dp = vec![S::zero(); n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let jmax = if causal { i + 1 } else { n };
                let p = &probs[(h * n + i) * n..(h * n + i) * n + jmax];
                let gi = &g.data()[i * d + off..i * d + off + dh];
                let mut dot = S::zero();
                for j in 0..jmax {
                    let vj = &vv[j * d + off..j * d + off + dh];
                    dp[j] = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    dot += p[j] * dp[j];
                    for (o, &gt) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                        *o += p[j] * gt;
                    }
                }
                for j in 0..jmax {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == S::zero() {
                        continue;
                    }
                    for t in 0..dh {
                        dq[i * d + off + t] += ds * vk[j * d + off + t];
                        dk[j * d + off + t] += ds * vq[i * d + off + t];
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                let dst = slot(grads, var, &[n, d]);
                for (o, x) in dst.data_mut().iter_mut().zip(buf) {
                    *o += x;
                }
            }
        }
    }
}

fn slot<'g, S: Scalar>(grads: &'g mut [Option<Tensor<S>>], var: Var, shape: &[usize]) -> &'g mut Tensor<S> {
    grads[var.0].get_or_insert_with(|| Tensor::zeros(shape))
}

#[cfg(test)]
#[path = "tape_tests.rs"]
mod tests;
