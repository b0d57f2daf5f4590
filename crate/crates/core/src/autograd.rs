//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation performed through it; [`Tape::backward`]
//! walks the record in reverse and returns gradients for the named leaves.
//! The tape is rebuilt per forward pass. With recording disabled the same
//! methods just compute values, which is how inference reuses the model code.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::hopfield::{attention_core, HeadLayout, RectificationConfig};
use crate::scalar::{gemm, Scalar, View};
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

const UNTRACKED: usize = usize::MAX;

/// A value produced through a [`Tape`].
#[derive(Clone, Debug)]
pub struct Var<T> {
    value: Arc<Tensor<T>>,
    node: usize,
    tape: u64,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn into_value(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|a| (*a).clone())
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    AddRowBias(usize, usize),
    BroadcastTokens(usize, usize),
    TileBatch(usize),
    Silu(usize),
    Gelu(usize),
    LayerNorm { x: usize, inv_std: Vec<T> },
    SplitCols { x: usize, start: usize, width: usize },
    ConcatTokens(usize, usize),
    SliceTokens { x: usize, start: usize },
    Gather { table: usize, ids: Vec<usize> },
    SelectRows { on: usize, off: usize, mask: Vec<bool> },
    Attention(Box<AttentionSaved<T>>),
    Opaque(&'static str),
    SoftmaxRows { x: usize, temperature: T },
    Sum(usize),
    Reshape(usize),
}

#[derive(Debug)]
struct AttentionSaved<T> {
    q: usize,
    k: usize,
    v: usize,
    lay: HeadLayout,
    probs: Vec<T>,
    row_scale: Vec<T>,
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Arc<Tensor<T>>,
}

/// Gradients of a scalar loss with respect to the named leaves.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    by_name: IndexMap<String, Tensor<T>>,
    by_node: Vec<Option<Tensor<T>>>,
    tape: u64,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    /// Gradient with respect to any tracked variable on the same tape.
    pub fn of(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        if v.tape != self.tape || v.node == UNTRACKED {
            return None;
        }
        self.by_node.get(v.node).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.by_name.iter()
    }

    pub fn into_named(self) -> IndexMap<String, Tensor<T>> {
        self.by_name
    }
}

/// Single-owner operation record.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    recording: bool,
    nodes: Vec<Node<T>>,
    names: IndexMap<String, usize>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: Vec::new(),
            names: IndexMap::new(),
        }
    }

    /// A tape that computes values without keeping any record.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var<T> {
        let value = Arc::new(value);
        let node = if self.recording {
            self.nodes.push(Node {
                op,
                value: value.clone(),
            });
            self.nodes.len() - 1
        } else {
            UNTRACKED
        };
        Var {
            value,
            node,
            tape: self.id,
        }
    }

    fn id_of(&self, v: &Var<T>) -> Result<usize> {
        if !self.recording {
            return Ok(UNTRACKED);
        }
        if v.tape != self.id || v.node == UNTRACKED || v.node >= self.nodes.len() {
            return Err(Error::Autograd("variable is not on this tape".into()));
        }
        Ok(v.node)
    }

    /// A differentiable leaf whose gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var<T> {
        let v = self.push(Op::Leaf, value);
        if self.recording {
            self.names.insert(name.to_string(), v.node);
        }
        v
    }

    /// A leaf with no reported gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var<T> {
        self.push(Op::Leaf, value)
    }

    /// `a[.., k] · b[k, n]`, leading dims of `a` flattened into rows.
    pub fn matmul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if b.value.rank() != 2 || a.value.rank() < 2 {
            return Err(shape_err("matmul", a.shape(), b.shape()));
        }
        let out = a.value.matmul(&b.value)?;
        let op = Op::MatMul(self.id_of(a)?, self.id_of(b)?);
        Ok(self.push(op, out))
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.add(&b.value)?;
        let op = Op::Add(self.id_of(a)?, self.id_of(b)?);
        Ok(self.push(op, out))
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.sub(&b.value)?;
        let op = Op::Sub(self.id_of(a)?, self.id_of(b)?);
        Ok(self.push(op, out))
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.mul(&b.value)?;
        let op = Op::Mul(self.id_of(a)?, self.id_of(b)?);
        Ok(self.push(op, out))
    }

    pub fn scale(&mut self, a: &Var<T>, s: T) -> Result<Var<T>> {
        let out = a.value.scale(s);
        let op = Op::Scale(self.id_of(a)?, s);
        Ok(self.push(op, out))
    }

    pub fn add_scalar(&mut self, a: &Var<T>, s: T) -> Result<Var<T>> {
        let out = a.value.map(|x| x + s);
        let op = Op::AddScalar(self.id_of(a)?);
        Ok(self.push(op, out))
    }

    /// `x[.., n] + b[n]`.
    pub fn add_row_bias(&mut self, x: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let n = x.value.cols();
        if b.value.len() != n {
            return Err(shape_err("add_row_bias", x.shape(), b.shape()));
        }
        let mut out = (*x.value).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(b.value.data()) {
                *o = *o + bb;
            }
        }
        let op = Op::AddRowBias(self.id_of(x)?, self.id_of(b)?);
        Ok(self.push(op, out))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(&y, b)
    }

    /// `[B, D] → [B, T, D]` by repeating each row `tokens` times.
    pub fn broadcast_tokens(&mut self, x: &Var<T>, tokens: usize) -> Result<Var<T>> {
        if x.value.rank() != 2 {
            return Err(shape_err("broadcast_tokens", x.shape(), &[]));
        }
        let (b, d) = (x.shape()[0], x.shape()[1]);
        let mut data = Vec::with_capacity(b * tokens * d);
        for row in x.value.data().chunks(d) {
            for _ in 0..tokens {
                data.extend_from_slice(row);
            }
        }
        let out = Tensor::new(vec![b, tokens, d], data)?;
        let op = Op::BroadcastTokens(self.id_of(x)?, tokens);
        Ok(self.push(op, out))
    }

    /// `[T, D] → [B, T, D]`.
    pub fn tile_batch(&mut self, x: &Var<T>, batch: usize) -> Result<Var<T>> {
        if x.value.rank() != 2 {
            return Err(shape_err("tile_batch", x.shape(), &[]));
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(x.shape());
        let data = x.value.data().repeat(batch);
        let out = Tensor::new(shape, data)?;
        let op = Op::TileBatch(self.id_of(x)?);
        Ok(self.push(op, out))
    }

    pub fn silu(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let out = x.value.map(|v| v / (T::one() + (-v).exp()));
        let op = Op::Silu(self.id_of(x)?);
        Ok(self.push(op, out))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let out = x.value.map(gelu);
        let op = Op::Gelu(self.id_of(x)?);
        Ok(self.push(op, out))
    }

    /// Affine-free layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let n = x.value.cols();
        let eps = T::lit(1e-6);
        let inv_n = T::one() / T::lit(n as f64);
        let mut out = (*x.value).clone();
        let mut inv_std = Vec::with_capacity(x.value.rows());
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let is = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let op = Op::LayerNorm {
            x: self.id_of(x)?,
            inv_std,
        };
        Ok(self.push(op, out))
    }

    /// Columns `[start, start + width)` of the last dimension.
    pub fn split_cols(&mut self, x: &Var<T>, start: usize, width: usize) -> Result<Var<T>> {
        let n = x.value.cols();
        if start + width > n {
            return Err(shape_err("split_cols", x.shape(), &[start, width]));
        }
        let data: Vec<T> = x
            .value
            .data()
            .chunks(n)
            .flat_map(|r| r[start..start + width].iter().copied())
            .collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let out = Tensor::new(shape, data)?;
        let op = Op::SplitCols {
            x: self.id_of(x)?,
            start,
            width,
        };
        Ok(self.push(op, out))
    }

    /// `[B, Ta, D] ‖ [B, Tb, D] → [B, Ta + Tb, D]`.
    pub fn concat_tokens(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(shape_err("concat_tokens", sa, sb));
        }
        let (bsz, ta, tb, d) = (sa[0], sa[1], sb[1], sa[2]);
        let mut data = Vec::with_capacity(bsz * (ta + tb) * d);
        for i in 0..bsz {
            data.extend_from_slice(&a.value.data()[i * ta * d..(i + 1) * ta * d]);
            data.extend_from_slice(&b.value.data()[i * tb * d..(i + 1) * tb * d]);
        }
        let out = Tensor::new(vec![bsz, ta + tb, d], data)?;
        let op = Op::ConcatTokens(self.id_of(a)?, self.id_of(b)?);
        Ok(self.push(op, out))
    }

    /// Tokens `[start, start + len)` of `[B, T, D]`.
    pub fn slice_tokens(&mut self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 3 || start + len > s[1] {
            return Err(shape_err("slice_tokens", s, &[start, len]));
        }
        let (bsz, t, d) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(bsz * len * d);
        for i in 0..bsz {
            let o = (i * t + start) * d;
            data.extend_from_slice(&x.value.data()[o..o + len * d]);
        }
        let out = Tensor::new(vec![bsz, len, d], data)?;
        let op = Op::SliceTokens {
            x: self.id_of(x)?,
            start,
        };
        Ok(self.push(op, out))
    }

    /// Rows of `table[V, D]` selected by `ids`, shaped `lead ++ [D]`.
    pub fn gather(&mut self, table: &Var<T>, ids: &[usize], lead: &[usize]) -> Result<Var<T>> {
        let (v, d) = (table.shape()[0], table.value.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument {
                op: "gather",
                msg: format!("index {bad} out of range for {v} rows"),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(table.value.row(i));
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let out = Tensor::new(shape, data)?;
        let op = Op::Gather {
            table: self.id_of(table)?,
            ids: ids.to_vec(),
        };
        Ok(self.push(op, out))
    }

    /// Per batch item, either `on[b]` or the shared `off` block.
    /// `on: [B, L, E]`, `off: [L, E]`, `mask[b] = true` keeps `on[b]`.
    pub fn select_rows(&mut self, on: &Var<T>, off: &Var<T>, mask: &[bool]) -> Result<Var<T>> {
        let s = on.shape();
        if s.len() != 3 || off.shape() != &s[1..] || mask.len() != s[0] {
            return Err(shape_err("select_rows", s, off.shape()));
        }
        let block = s[1] * s[2];
        let mut data = Vec::with_capacity(on.value.len());
        for (i, &keep) in mask.iter().enumerate() {
            if keep {
                data.extend_from_slice(&on.value.data()[i * block..(i + 1) * block]);
            } else {
                data.extend_from_slice(off.value.data());
            }
        }
        let out = Tensor::new(s.to_vec(), data)?;
        let op = Op::SelectRows {
            on: self.id_of(on)?,
            off: self.id_of(off)?,
            mask: mask.to_vec(),
        };
        Ok(self.push(op, out))
    }

    /// Head-split attention of projected `q, k, v: [B, T, D]`. Rows below
    /// `rect_rows` follow `cfg`; the result is differentiable only when the
    /// rectification reduces to a per-row softmax temperature.
    pub fn attention(
        &mut self,
        q: &Var<T>,
        k: &Var<T>,
        v: &Var<T>,
        heads: usize,
        cfg: &RectificationConfig,
        rect_rows: usize,
    ) -> Result<(Var<T>, Vec<T>)> {
        let s = q.shape();
        if s.len() != 3 || k.shape() != s || v.shape() != s || heads == 0 || s[2] % heads != 0 {
            return Err(shape_err("attention", s, k.shape()));
        }
        let lay = HeadLayout {
            batch: s[0],
            tokens: s[1],
            heads,
            head_dim: s[2] / heads,
        };
        let att = attention_core(q.value.data(), k.value.data(), v.value.data(), lay, cfg, rect_rows);
        let out = Tensor::new(s.to_vec(), att.out)?;
        let op = if att.differentiable {
            if self.recording {
                Op::Attention(Box::new(AttentionSaved {
                    q: self.id_of(q)?,
                    k: self.id_of(k)?,
                    v: self.id_of(v)?,
                    lay,
                    probs: att.probs.clone(),
                    row_scale: att.row_scale,
                }))
            } else {
                Op::Opaque("attention")
            }
        } else {
            Op::Opaque("rectified attention")
        };
        Ok((self.push(op, out), att.probs))
    }

    pub fn softmax_rows(&mut self, x: &Var<T>, temperature: T) -> Result<Var<T>> {
        let out = x.value.softmax_rows(temperature)?;
        let op = Op::SoftmaxRows {
            x: self.id_of(x)?,
            temperature,
        };
        Ok(self.push(op, out))
    }

    pub fn sum(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let out = Tensor::scalar(x.value.sum());
        let op = Op::Sum(self.id_of(x)?);
        Ok(self.push(op, out))
    }

    pub fn reshape(&mut self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = x.value.reshape(shape)?;
        let op = Op::Reshape(self.id_of(x)?);
        Ok(self.push(op, out))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::Autograd("tape is not recording".into()));
        }
        if loss.tape != self.id || loss.node == UNTRACKED || loss.node >= self.nodes.len() {
            return Err(Error::Autograd("loss is not on this tape".into()));
        }
        if loss.value.len() != 1 {
            return Err(Error::Autograd(format!(
                "loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.node] = Some(Tensor::full(loss.shape(), T::one()));

        for id in (0..=loss.node).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let by_name = self
            .names
            .iter()
            .map(|(name, &id)| {
                let g = grads[id]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[id].value.shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients {
            by_name,
            by_node: grads,
            tape: self.id,
        })
    }

    fn val(&self, id: usize) -> &Tensor<T> {
        &self.nodes[id].value
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let k = av.cols();
                let n = bv.cols();
                let m = av.rows();
                let mut ga = vec![T::zero(); m * k];
                gemm(m, n, k, T::one(), g.data(), View::row_major(0, n), bv.data(), View::transposed(0, n), T::zero(), &mut ga, View::row_major(0, k));
                let mut gb = vec![T::zero(); k * n];
                gemm(k, m, n, T::one(), av.data(), View::transposed(0, k), g.data(), View::row_major(0, n), T::zero(), &mut gb, View::row_major(0, n));
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
                accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.mul(self.val(*b))?);
                accumulate(grads, *b, g.mul(self.val(*a))?);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::AddRowBias(x, b) => {
                accumulate(grads, *x, g.clone());
                let n = g.cols();
                let mut gb = vec![T::zero(); n];
                for row in g.data().chunks(n) {
                    for (o, &v) in gb.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                accumulate(grads, *b, Tensor::new(self.val(*b).shape().to_vec(), gb)?);
            }
            Op::BroadcastTokens(x, tokens) => {
                let xs = self.val(*x).shape();
                let d = xs[1];
                let mut gx = vec![T::zero(); xs[0] * d];
                for (bi, block) in g.data().chunks(tokens * d).enumerate() {
                    let dst = &mut gx[bi * d..(bi + 1) * d];
                    for row in block.chunks(d) {
                        for (o, &v) in dst.iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xs.to_vec(), gx)?);
            }
            Op::TileBatch(x) => {
                let xs = self.val(*x).shape();
                let block: usize = xs.iter().product();
                let mut gx = vec![T::zero(); block];
                for chunk in g.data().chunks(block) {
                    for (o, &v) in gx.iter_mut().zip(chunk) {
                        *o = *o + v;
                    }
                }
                accumulate(grads, *x, Tensor::new(xs.to_vec(), gx)?);
            }
            Op::Silu(x) => {
                let gx = self.val(*x).zip_map(g, "silu", |v, gv| {
                    let s = T::one() / (T::one() + (-v).exp());
                    gv * s * (T::one() + v * (T::one() - s))
                })?;
                accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let gx = self.val(*x).zip_map(g, "gelu", |v, gv| gv * gelu_grad(v))?;
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let n = y.cols();
                let inv_n = T::one() / T::lit(n as f64);
                let mut gx = vec![T::zero(); y.len()];
                for (r, ((yr, gr), o)) in y
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(gx.chunks_mut(n))
                    .enumerate()
                {
                    let mg = gr.iter().copied().sum::<T>() * inv_n;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                    for i in 0..n {
                        o[i] = inv_std[r] * (gr[i] - mg - yr[i] * mgy);
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::SplitCols { x, start, width } => {
                let xv = self.val(*x);
                let n = xv.cols();
                let mut gx = vec![T::zero(); xv.len()];
                for (dst, src) in gx.chunks_mut(n).zip(g.data().chunks(*width)) {
                    dst[*start..start + width].copy_from_slice(src);
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::ConcatTokens(a, b) => {
                let (sa, sb) = (self.val(*a).shape().to_vec(), self.val(*b).shape().to_vec());
                let (ta, tb, d) = (sa[1], sb[1], sa[2]);
                let mut ga = Vec::with_capacity(self.val(*a).len());
                let mut gb = Vec::with_capacity(self.val(*b).len());
                for block in g.data().chunks((ta + tb) * d) {
                    ga.extend_from_slice(&block[..ta * d]);
                    gb.extend_from_slice(&block[ta * d..]);
                }
                accumulate(grads, *a, Tensor::new(sa, ga)?);
                accumulate(grads, *b, Tensor::new(sb, gb)?);
            }
            Op::SliceTokens { x, start } => {
                let xs = self.val(*x).shape().to_vec();
                let (t, d) = (xs[1], xs[2]);
                let len = g.shape()[1];
                let mut gx = vec![T::zero(); xs.iter().product()];
                for (bi, src) in g.data().chunks(len * d).enumerate() {
                    let o = (bi * t + start) * d;
                    gx[o..o + len * d].copy_from_slice(src);
                }
                accumulate(grads, *x, Tensor::new(xs, gx)?);
            }
            Op::Gather { table, ids } => {
                let tv = self.val(*table);
                let d = tv.cols();
                let mut gt = vec![T::zero(); tv.len()];
                for (&i, src) in ids.iter().zip(g.data().chunks(d)) {
                    for (o, &v) in gt[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *o = *o + v;
                    }
                }
                accumulate(grads, *table, Tensor::new(tv.shape().to_vec(), gt)?);
            }
            Op::SelectRows { on, off, mask } => {
                let offv = self.val(*off);
                let block = offv.len();
                let mut g_on = vec![T::zero(); g.len()];
                let mut g_off = vec![T::zero(); block];
                for (i, (&keep, src)) in mask.iter().zip(g.data().chunks(block)).enumerate() {
                    if keep {
                        g_on[i * block..(i + 1) * block].copy_from_slice(src);
                    } else {
                        for (o, &v) in g_off.iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                }
                accumulate(grads, *on, Tensor::new(g.shape().to_vec(), g_on)?);
                accumulate(grads, *off, Tensor::new(offv.shape().to_vec(), g_off)?);
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads)?,
            Op::Opaque(what) => {
                return Err(Error::Autograd(format!("{what} has no backward")));
            }
            Op::SoftmaxRows { x, temperature } => {
                let y = &node.value;
                let n = y.cols();
                let mut gx = vec![T::zero(); y.len()];
                for ((yr, gr), o) in y.data().chunks(n).zip(g.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for i in 0..n {
                        o[i] = *temperature * yr[i] * (gr[i] - s);
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::Sum(x) => {
                let xs = self.val(*x).shape();
                accumulate(grads, *x, Tensor::full(xs, g.data()[0]));
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, g.reshape(self.val(*x).shape())?);
            }
        }
        Ok(())
    }

    fn attention_backward(&self, s: &AttentionSaved<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let HeadLayout {
            batch: b,
            tokens: t,
            heads: h,
            head_dim: dh,
        } = s.lay;
        let d = s.lay.dim();
        let (q, k, v) = (self.val(s.q).data(), self.val(s.k).data(), self.val(s.v).data());
        let go = g.data();
        let mut gq = vec![T::zero(); b * t * d];
        let mut gk = vec![T::zero(); b * t * d];
        let mut gv = vec![T::zero(); b * t * d];
        let mut dp = vec![T::zero(); t * t];
        for bi in 0..b {
            for hi in 0..h {
                let base = bi * t * d + hi * dh;
                let head = View { offset: base, rs: d, cs: 1 };
                let head_t = View { offset: base, rs: 1, cs: d };
                let p_off = (bi * h + hi) * t * t;
                let p = &s.probs[p_off..p_off + t * t];
                // dV = Pᵀ dO
                gemm(t, t, dh, T::one(), p, View::transposed(0, t), go, head, T::one(), &mut gv, head);
                // dP = dO Vᵀ
                gemm(t, dh, t, T::one(), go, head, v, head_t, T::zero(), &mut dp, View::row_major(0, t));
                // dS = scale_i · P ⊙ (dP − rowsum(dP ⊙ P))
                for (i, (dr, pr)) in dp.chunks_mut(t).zip(p.chunks(t)).enumerate() {
                    let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for (x, &pv) in dr.iter_mut().zip(pr) {
                        *x = s.row_scale[i] * pv * (*x - dot);
                    }
                }
                // dQ = dS K, dK = dSᵀ Q
                gemm(t, t, dh, T::one(), &dp, View::row_major(0, t), k, head, T::one(), &mut gq, head);
                gemm(t, t, dh, T::one(), &dp, View::transposed(0, t), q, head, T::one(), &mut gk, head);
            }
        }
        let shape = vec![b, t, d];
        accumulate(grads, s.q, Tensor::new(shape.clone(), gq)?);
        accumulate(grads, s.k, Tensor::new(shape.clone(), gk)?);
        accumulate(grads, s.v, Tensor::new(shape, gv)?);
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `½(1 + tanh z) = σ(2z)` with `z = √(2/π)(x + 0.044715x³)`.
fn gelu_gate<T: Scalar>(x: T) -> T {
    let z = T::lit(2.0 * GELU_C) * (x + T::lit(0.044715) * x * x * x);
    T::one() / (T::one() + (-z).exp())
}

fn gelu<T: Scalar>(x: T) -> T {
    x * gelu_gate(x)
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let s = gelu_gate(x);
    let dz = T::lit(2.0 * GELU_C) * (T::one() + T::lit(3.0 * 0.044715) * x * x);
    s + x * s * (T::one() - s) * dz
}
