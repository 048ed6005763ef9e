//! Self, cross and anchor attention with axial rotary position embedding,
//! packaged as pre-norm residual transformer blocks.
//!
//! Anchor attention is cross attention whose keys and values come from a
//! subset of the query sequence itself; callers own the anchor draw so one
//! draw can be shared by every block of a forward pass.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{softmax_in_place, Graph, RopeTable, Var};
use crate::error::{Error, Result};
use crate::nn::{DenseLayer, MlpBlock, NormLayer, ParamSpec, ParamStore, Parameterized};
use crate::tensor::Matrix;

pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PositionedSequence {
    pub tokens: Matrix,
    /// `n x 3` coordinates in normalized units.
    pub positions: Matrix,
}

impl PositionedSequence {
    pub fn new(tokens: Matrix, positions: Matrix) -> Result<Self> {
        if tokens.rows() != positions.rows() || positions.cols() != 3 {
            return Err(Error::Shape(format!(
                "{} tokens with positions of shape {:?}",
                tokens.rows(),
                positions.shape()
            )));
        }
        Ok(Self { tokens, positions })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// Strictly increasing, nonempty row indices into a sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorIndexSet(Vec<usize>);

impl AnchorIndexSet {
    pub fn new(indices: Vec<usize>, seq_len: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidInput("anchor set is empty".into()));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(
                "anchor indices must be strictly increasing".into(),
            ));
        }
        if let Some(&last) = indices.last() {
            if last >= seq_len {
                return Err(Error::InvalidInput(format!(
                    "anchor index {last} out of range for length {seq_len}"
                )));
            }
        }
        Ok(Self(indices))
    }

    pub fn all(seq_len: usize) -> Result<Self> {
        Self::new((0..seq_len).collect(), seq_len)
    }

    /// Uniform draw of `count` distinct anchors, returned sorted.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, seq_len: usize, count: usize) -> Result<Self> {
        if count > seq_len {
            return Err(Error::Sizing(format!(
                "cannot draw {count} anchors from {seq_len} points"
            )));
        }
        let mut idx = rand::seq::index::sample(rng, seq_len, count).into_vec();
        idx.sort_unstable();
        Self::new(idx, seq_len)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Splits `pairs` feature pairs over the x/y/z axes, extras going to x then y.
pub fn axis_pair_split(pairs: usize) -> [usize; 3] {
    let base = pairs / 3;
    let rem = pairs % 3;
    [base + usize::from(rem > 0), base + usize::from(rem > 1), base]
}

/// Per-pair `(axis, frequency)` for a head of width `d_head`.
pub fn rope_frequencies(d_head: usize) -> Result<Vec<(usize, f64)>> {
    if d_head == 0 || d_head % 2 != 0 {
        return Err(Error::Config(format!(
            "rotary embedding needs an even head width, got {d_head}"
        )));
    }
    let split = axis_pair_split(d_head / 2);
    let mut out = Vec::with_capacity(d_head / 2);
    for (axis, &count) in split.iter().enumerate() {
        for j in 0..count {
            out.push((axis, ROPE_BASE.powf(-(j as f64) / count as f64)));
        }
    }
    Ok(out)
}

pub fn rope_table(positions: &Matrix, d_head: usize) -> Result<Arc<RopeTable>> {
    if positions.cols() != 3 {
        return Err(Error::Shape(format!(
            "positions must have 3 columns, got {}",
            positions.cols()
        )));
    }
    let freqs = rope_frequencies(d_head)?;
    let n = positions.rows();
    let mut cos = Matrix::zeros(n, freqs.len());
    let mut sin = Matrix::zeros(n, freqs.len());
    for r in 0..n {
        let p = positions.row(r);
        for (j, &(axis, f)) in freqs.iter().enumerate() {
            let a = f * p[axis];
            cos.set(r, j, a.cos());
            sin.set(r, j, a.sin());
        }
    }
    Ok(Arc::new(RopeTable { cos, sin }))
}

pub(crate) fn gather_table(t: &RopeTable, idx: &[usize]) -> Arc<RopeTable> {
    Arc::new(RopeTable {
        cos: t.cos.gather_rows(idx),
        sin: t.sin.gather_rows(idx),
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    if logits.as_slice().iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidInput("softmax input contains NaN".into()));
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

/// Rotates the feature pairs of a single head's projections by position.
pub fn rope_embed(positions: &Matrix, projected: &Matrix) -> Result<Matrix> {
    if positions.rows() != projected.rows() {
        return Err(Error::Shape(format!(
            "{} positions for {} rows",
            positions.rows(),
            projected.rows()
        )));
    }
    let table = rope_table(positions, projected.cols())?;
    Ok(crate::autodiff::rope_apply(projected, &table, false))
}

/// Multi-head attention weights: concatenated heads of width `d / heads`
/// followed by an output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    pub name: String,
    pub d: usize,
    pub heads: usize,
    pub q: DenseLayer,
    pub k: DenseLayer,
    pub v: DenseLayer,
    pub o: DenseLayer,
}

impl AttentionLayer {
    pub fn new(name: impl Into<String>, d: usize, heads: usize) -> Result<Self> {
        let name = name.into();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        if (d / heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head width {} must be even for rotary embedding",
                d / heads
            )));
        }
        Ok(Self {
            q: DenseLayer::new(format!("{name}.q"), d, d),
            k: DenseLayer::new(format!("{name}.k"), d, d),
            v: DenseLayer::new(format!("{name}.v"), d, d),
            o: DenseLayer::new(format!("{name}.o"), d, d),
            name,
            d,
            heads,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d / self.heads
    }

    /// Queries from `xq`, keys/values from `xkv`; rotary tables must match
    /// each sequence's rows.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xq: Var,
        tq: &Arc<RopeTable>,
        xkv: Var,
        tkv: &Arc<RopeTable>,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, xq)?;
        let q = g.rope(q, tq.clone())?;
        let k = self.k.forward(g, store, xkv)?;
        let k = g.rope(k, tkv.clone())?;
        let v = self.v.forward(g, store, xkv)?;
        let heads = g.attention(q, k, v, self.heads)?;
        self.o.forward(g, store, heads)
    }
}

impl Parameterized for AttentionLayer {
    fn param_specs(&self) -> Vec<ParamSpec> {
        [&self.q, &self.k, &self.v, &self.o]
            .iter()
            .flat_map(|l| l.param_specs())
            .collect()
    }
}

/// Where a block's keys and values come from.
pub enum KeySource<'a> {
    /// Full self-attention.
    Itself,
    /// Anchor self-attention over the given rows of the input.
    ItselfAnchors(&'a [usize]),
    /// Cross-attention to another sequence.
    Other(Var, &'a Arc<RopeTable>),
    /// Cross-attention to a row subset of another sequence.
    OtherAnchors(Var, &'a Arc<RopeTable>, &'a [usize]),
}

/// Pre-norm residual block: `y = x + Attn(Norm1(x))`, `z = y + Mlp(Norm2(y))`.
/// The key/value sequence goes through the same first norm.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub name: String,
    pub norm1: NormLayer,
    pub attn: AttentionLayer,
    pub norm2: NormLayer,
    pub mlp: MlpBlock,
}

impl TransformerBlock {
    pub fn new(name: impl Into<String>, d: usize, heads: usize) -> Result<Self> {
        let name = name.into();
        Ok(Self {
            norm1: NormLayer::new(format!("{name}.norm1"), d),
            attn: AttentionLayer::new(format!("{name}.attn"), d, heads)?,
            norm2: NormLayer::new(format!("{name}.norm2"), d),
            mlp: MlpBlock::new(format!("{name}.mlp"), d, 4 * d, d),
            name,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        tx: &Arc<RopeTable>,
        source: KeySource<'_>,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let attn = match source {
            KeySource::Itself => self.attn.forward(g, store, h, tx, h, tx)?,
            KeySource::ItselfAnchors(idx) => {
                let kv = g.gather_rows(h, idx)?;
                let t = gather_table(tx, idx);
                self.attn.forward(g, store, h, tx, kv, &t)?
            }
            KeySource::Other(y, ty) => {
                let kv = self.norm1.forward(g, store, y)?;
                self.attn.forward(g, store, h, tx, kv, ty)?
            }
            KeySource::OtherAnchors(y, ty, idx) => {
                let sub = g.gather_rows(y, idx)?;
                let kv = self.norm1.forward(g, store, sub)?;
                let t = gather_table(ty, idx);
                self.attn.forward(g, store, h, tx, kv, &t)?
            }
        };
        let x = g.add(x, attn)?;
        let h = self.norm2.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        g.add(x, m)
    }
}

impl Parameterized for TransformerBlock {
    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.norm1.param_specs();
        v.extend(self.attn.param_specs());
        v.extend(self.norm2.param_specs());
        v.extend(self.mlp.param_specs());
        v
    }
}

/// Plain multi-head attention of `query_seq` over `kv_seq` (self-attention
/// when both are the same sequence).
pub fn attend(
    query_seq: &PositionedSequence,
    kv_seq: &PositionedSequence,
    layer: &AttentionLayer,
    store: &ParamStore,
) -> Result<Matrix> {
    if kv_seq.is_empty() {
        return Err(Error::InvalidInput("key/value sequence is empty".into()));
    }
    let mut g = Graph::new();
    let tq = rope_table(&query_seq.positions, layer.d_head())?;
    let tk = rope_table(&kv_seq.positions, layer.d_head())?;
    let xq = g.input(query_seq.tokens.clone());
    let xk = g.input(kv_seq.tokens.clone());
    let y = layer.forward(&mut g, store, xq, &tq, xk, &tk)?;
    Ok(g.value(y).clone())
}

/// Anchor attention: keys/values from the anchor rows only, queries from
/// every row, evaluated in query chunks of `chunk_size`.
pub fn anchor_attend(
    seq: &PositionedSequence,
    anchors: &AnchorIndexSet,
    layer: &AttentionLayer,
    store: &ParamStore,
    chunk_size: usize,
) -> Result<Matrix> {
    if anchors.is_empty() {
        return Err(Error::InvalidInput("anchor set is empty".into()));
    }
    if chunk_size == 0 {
        return Err(Error::InvalidInput("chunk size must be positive".into()));
    }
    let mut g = Graph::with_attention_chunk(chunk_size);
    let tq = rope_table(&seq.positions, layer.d_head())?;
    let x = g.input(seq.tokens.clone());
    let kv = g.gather_rows(x, anchors.as_slice())?;
    let tk = gather_table(&tq, anchors.as_slice());
    let y = layer.forward(&mut g, store, x, &tq, kv, &tk)?;
    Ok(g.value(y).clone())
}

pub enum BlockInput<'a> {
    SelfAttention(&'a PositionedSequence),
    Cross(&'a PositionedSequence, &'a PositionedSequence),
    AnchorSelf(&'a PositionedSequence, &'a AnchorIndexSet),
    AnchorCross(&'a PositionedSequence, &'a PositionedSequence, &'a AnchorIndexSet),
}

/// Evaluates one transformer block outside of a training graph.
pub fn transformer_block(block: &TransformerBlock, store: &ParamStore, input: BlockInput<'_>) -> Result<Matrix> {
    let mut g = Graph::new();
    let dh = block.attn.d_head();
    let (q_seq, other) = match &input {
        BlockInput::SelfAttention(s) | BlockInput::AnchorSelf(s, _) => (*s, None),
        BlockInput::Cross(q, kv) | BlockInput::AnchorCross(q, kv, _) => (*q, Some(*kv)),
    };
    let tq = rope_table(&q_seq.positions, dh)?;
    let x = g.input(q_seq.tokens.clone());
    let y = match (&input, other) {
        (BlockInput::SelfAttention(_), _) => block.forward(&mut g, store, x, &tq, KeySource::Itself)?,
        (BlockInput::AnchorSelf(_, a), _) => {
            block.forward(&mut g, store, x, &tq, KeySource::ItselfAnchors(a.as_slice()))?
        }
        (BlockInput::Cross(..), Some(kv)) => {
            let tk = rope_table(&kv.positions, dh)?;
            let y = g.input(kv.tokens.clone());
            block.forward(&mut g, store, x, &tq, KeySource::Other(y, &tk))?
        }
        (BlockInput::AnchorCross(_, _, a), Some(kv)) => {
            let tk = rope_table(&kv.positions, dh)?;
            let y = g.input(kv.tokens.clone());
            block.forward(&mut g, store, x, &tq, KeySource::OtherAnchors(y, &tk, a.as_slice()))?
        }
        _ => unreachable!("cross inputs always carry a key sequence"),
    };
    Ok(g.value(y).clone())
}
