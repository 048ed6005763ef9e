//! Reverse-mode differentiation over a flat tape of matrix operations.
//!
//! The model builds a [`Graph`] once per forward pass. Trainable tensors enter
//! through [`Graph::param`], which deduplicates by name so that shared blocks
//! accumulate gradient from every use. Everything else is either a constant
//! input or a derived node. Attention is a single fused node whose backward
//! pass recomputes the softmax per query chunk, so only `O(chunk * n_kv)`
//! score memory is live at any time.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_raw, Matrix, Trans};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_ATTENTION_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-row rotation table for rotary embeddings: `cos`/`sin` are `n x pairs`
/// where `pairs = d_head / 2`; every head applies the same table.
#[derive(Clone, Debug)]
pub struct RopeTable {
    pub cos: Matrix,
    pub sin: Matrix,
}

impl RopeTable {
    pub fn pairs(&self) -> usize {
        self.cos.cols()
    }
}

enum Op {
    Input,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddRow { x: Var, row: Var },
    Gelu(Var),
    LayerNorm { x: Var, scale: Var, shift: Var, xhat: Matrix, inv_std: Vec<f64> },
    Rope { x: Var, table: Arc<RopeTable> },
    Attention { q: Var, k: Var, v: Var, heads: usize, chunk: usize, lse: Matrix },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SegmentMean { x: Var, offsets: Vec<usize> },
    Mse { pred: Var, target: Matrix, rows: Option<Vec<usize>> },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    attention_chunk: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            attention_chunk: DEFAULT_ATTENTION_CHUNK,
        }
    }

    pub fn with_attention_chunk(chunk: usize) -> Self {
        let mut g = Self::new();
        g.attention_chunk = chunk.max(1);
        g
    }

    pub fn attention_chunk(&self) -> usize {
        self.attention_chunk
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input, false)
    }

    /// Trainable leaf, one per distinct name.
    pub fn param(&mut self, name: &str, m: &Matrix) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(m.clone(), Op::Param, true);
        self.params.insert(name.to_string(), v);
        v
    }

    /// `x W^T + b` with `W` stored `d_out x d_in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.shape(x);
        let (dout, win) = self.shape(w);
        if din != win {
            return Err(Error::Shape(format!(
                "dense layer expects input width {win}, got {din}"
            )));
        }
        let mut y = Matrix::zeros(n, dout);
        gemm(1.0, self.value(x), Trans::No, self.value(w), Trans::Yes, 0.0, &mut y);
        if let Some(b) = b {
            let bias = self.value(b).as_slice().to_vec();
            if bias.len() != dout {
                return Err(Error::Shape(format!(
                    "bias has {} entries, layer output is {dout}",
                    bias.len()
                )));
            }
            for r in 0..n {
                for (o, bv) in y.row_mut(r).iter_mut().zip(&bias) {
                    *o += bv;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(y, Op::Linear { x, w, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "cannot add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(y, Op::Add(a, b), ng))
    }

    /// Adds a `1 x d` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(row) != (1, d) {
            return Err(Error::Shape(format!(
                "broadcast row has shape {:?}, expected (1, {d})",
                self.shape(row)
            )));
        }
        let mut y = self.value(x).clone();
        let r = self.value(row).as_slice().to_vec();
        for i in 0..n {
            for (o, v) in y.row_mut(i).iter_mut().zip(&r) {
                *o += v;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(y, Op::AddRow { x, row }, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(gelu_scalar);
        let ng = self.ng(x);
        self.push(y, Op::Gelu(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(scale) != (1, d) || self.shape(shift) != (1, d) {
            return Err(Error::Shape(format!(
                "norm parameters must be (1, {d})"
            )));
        }
        let xv = self.value(x);
        let mut xhat = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(scale).as_slice().to_vec();
        let bsh = self.value(shift).as_slice().to_vec();
        let mut y = xhat.clone();
        for r in 0..n {
            for ((o, gv), bv) in y.row_mut(r).iter_mut().zip(&g).zip(&bsh) {
                *o = *o * gv + bv;
            }
        }
        let ng = self.ng(x) || self.ng(scale) || self.ng(shift);
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Rotates each adjacent feature pair of every head by the table's angles.
    pub fn rope(&mut self, x: Var, table: Arc<RopeTable>) -> Result<Var> {
        let (n, d) = self.shape(x);
        let pairs = table.pairs();
        if table.cos.rows() != n {
            return Err(Error::Shape(format!(
                "rotary table covers {} rows, sequence has {n}",
                table.cos.rows()
            )));
        }
        if pairs == 0 || d % (2 * pairs) != 0 {
            return Err(Error::Shape(format!(
                "width {d} is not a multiple of the rotary head width {}",
                2 * pairs
            )));
        }
        let y = rope_apply(self.value(x), &table, false);
        let ng = self.ng(x);
        Ok(self.push(y, Op::Rope { x, table }, ng))
    }

    /// Multi-head scaled dot-product attention of `q` (n x d) over `k`, `v`
    /// (m x d). Heads are contiguous column blocks of width `d / heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.shape(q);
        let (m, dk) = self.shape(k);
        if m == 0 {
            return Err(Error::InvalidInput(
                "attention needs at least one key/value token".into(),
            ));
        }
        if self.shape(v) != (m, dk) || dk != d {
            return Err(Error::Shape(format!(
                "attention shapes q {:?} k {:?} v {:?} disagree",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} not divisible into {heads} heads"
            )));
        }
        let chunk = self.attention_chunk;
        let (out, lse) = attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            heads,
            chunk,
        );
        debug_assert_eq!(out.shape(), (n, d));
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                chunk,
                lse,
            },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.shape(x).0;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidInput(format!(
                "row index {bad} out of range for {n} rows"
            )));
        }
        let y = self.value(x).gather_rows(idx);
        let ng = self.ng(x);
        Ok(self.push(
            y,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Matrix::vstack(&mats)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(y, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Matrix::hstack(&mats)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(y, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Mean of consecutive row segments: segment `s` spans rows
    /// `offsets[s]..offsets[s + 1]`. Segments must be nonempty.
    pub fn segment_mean(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let (n, d) = self.shape(x);
        if offsets.first() != Some(&0) || offsets.last() != Some(&n) {
            return Err(Error::Shape("segment offsets must span all rows".into()));
        }
        let segs = offsets.len() - 1;
        let mut y = Matrix::zeros(segs, d);
        let xv = self.value(x);
        for s in 0..segs {
            let (a, b) = (offsets[s], offsets[s + 1]);
            if b <= a {
                return Err(Error::InvalidInput(format!("segment {s} is empty")));
            }
            let inv = 1.0 / (b - a) as f64;
            let out = y.row_mut(s);
            for r in a..b {
                for (o, v) in out.iter_mut().zip(xv.row(r)) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            y,
            Op::SegmentMean {
                x,
                offsets: offsets.to_vec(),
            },
            ng,
        ))
    }

    /// Mean squared error against a constant target, optionally restricted to
    /// a subset of rows. Produces a `1 x 1` node.
    pub fn mse(&mut self, pred: Var, target: Matrix, rows: Option<Vec<usize>>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs target {:?}",
                self.shape(pred),
                target.shape()
            )));
        }
        let p = self.value(pred);
        let cols = p.cols();
        let (sum, count) = match &rows {
            None => (
                p.as_slice()
                    .iter()
                    .zip(target.as_slice())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>(),
                p.as_slice().len(),
            ),
            Some(rs) => {
                let mut s = 0.0;
                for &r in rs {
                    for (a, b) in p.row(r).iter().zip(target.row(r)) {
                        s += (a - b) * (a - b);
                    }
                }
                (s, rs.len() * cols)
            }
        };
        if count == 0 {
            return Err(Error::InvalidInput("loss over zero entries".into()));
        }
        let y = Matrix::row_vector(&[sum / count as f64]);
        let ng = self.ng(pred);
        Ok(self.push(y, Op::Mse { pred, target, rows }, ng))
    }

    /// Back-propagates from a scalar node; returns gradients of every named
    /// parameter that influenced it (parameters with no path get zeros).
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<String, Matrix>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape("backward needs a scalar root".into()));
        }
        let mut grads = self.backward_from(loss, Matrix::row_vector(&[1.0]));
        let mut out = BTreeMap::new();
        for (name, &v) in &self.params {
            let g = grads[v.0]
                .take()
                .unwrap_or_else(|| Matrix::zeros(self.value(v).rows(), self.value(v).cols()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// Vector-Jacobian product: seeds `root` with `seed` and returns the raw
    /// per-node gradient table (indexed by `Var`).
    pub fn backward_from(&self, root: Var, seed: Matrix) -> Vec<Option<Matrix>> {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        grads
    }

    pub fn grad_of(grads: &[Option<Matrix>], v: Var) -> Option<&Matrix> {
        grads[v.0].as_ref()
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, gy: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.ng(*x) {
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    gemm(1.0, gy, Trans::No, wv, Trans::No, 0.0, &mut gx);
                    self.accumulate(grads, *x, gx);
                }
                if self.ng(*w) {
                    let mut gw = Matrix::zeros(wv.rows(), wv.cols());
                    gemm(1.0, gy, Trans::Yes, xv, Trans::No, 0.0, &mut gw);
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        self.accumulate(grads, *b, col_sum(gy));
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::AddRow { x, row } => {
                self.accumulate(grads, *x, gy.clone());
                self.accumulate(grads, *row, col_sum(gy));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut gx = gy.clone();
                for (g, &xi) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                    *g *= gelu_grad_scalar(xi);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let (n, d) = xhat.shape();
                let gamma = self.value(*scale).as_slice();
                if self.ng(*scale) {
                    let mut gs = Matrix::zeros(1, d);
                    for r in 0..n {
                        for ((o, g), h) in gs.row_mut(0).iter_mut().zip(gy.row(r)).zip(xhat.row(r)) {
                            *o += g * h;
                        }
                    }
                    self.accumulate(grads, *scale, gs);
                }
                if self.ng(*shift) {
                    self.accumulate(grads, *shift, col_sum(gy));
                }
                if self.ng(*x) {
                    let mut gx = Matrix::zeros(n, d);
                    let inv_d = 1.0 / d as f64;
                    for r in 0..n {
                        let gh: Vec<f64> =
                            gy.row(r).iter().zip(gamma).map(|(g, s)| g * s).collect();
                        let mean_gh = gh.iter().sum::<f64>() * inv_d;
                        let mean_ghx =
                            gh.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum::<f64>() * inv_d;
                        for ((o, g), h) in gx.row_mut(r).iter_mut().zip(&gh).zip(xhat.row(r)) {
                            *o = inv_std[r] * (g - mean_gh - h * mean_ghx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Rope { x, table } => {
                self.accumulate(grads, *x, rope_apply(gy, table, true));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                chunk,
                lse,
            } => {
                let (gq, gk, gv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    &node.value,
                    lse,
                    gy,
                    *heads,
                    *chunk,
                );
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
            Op::GatherRows { x, idx } => {
                if self.ng(*x) {
                    let (n, d) = self.shape(*x);
                    let mut gx = Matrix::zeros(n, d);
                    for (o, &i) in idx.iter().enumerate() {
                        for (a, b) in gx.row_mut(i).iter_mut().zip(gy.row(o)) {
                            *a += b;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = self.shape(p).0;
                    if self.ng(p) {
                        self.accumulate(grads, p, gy.slice_rows(off, off + r));
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (n, c) = self.shape(p);
                    if self.ng(p) {
                        let mut gp = Matrix::zeros(n, c);
                        for r in 0..n {
                            gp.row_mut(r).copy_from_slice(&gy.row(r)[off..off + c]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += c;
                }
            }
            Op::SegmentMean { x, offsets } => {
                if self.ng(*x) {
                    let (n, d) = self.shape(*x);
                    let mut gx = Matrix::zeros(n, d);
                    for s in 0..offsets.len() - 1 {
                        let (a, b) = (offsets[s], offsets[s + 1]);
                        let inv = 1.0 / (b - a) as f64;
                        for r in a..b {
                            for (o, g) in gx.row_mut(r).iter_mut().zip(gy.row(s)) {
                                *o = g * inv;
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Mse { pred, target, rows } => {
                let p = self.value(*pred);
                let seed = gy.get(0, 0);
                let mut gp = Matrix::zeros(p.rows(), p.cols());
                match rows {
                    None => {
                        let scale = 2.0 * seed / p.as_slice().len() as f64;
                        for ((o, a), b) in gp
                            .as_mut_slice()
                            .iter_mut()
                            .zip(p.as_slice())
                            .zip(target.as_slice())
                        {
                            *o = scale * (a - b);
                        }
                    }
                    Some(rs) => {
                        let scale = 2.0 * seed / (rs.len() * p.cols()) as f64;
                        for &r in rs {
                            let tr = target.row(r).to_vec();
                            let pr = p.row(r).to_vec();
                            for ((o, a), b) in gp.row_mut(r).iter_mut().zip(&pr).zip(&tr) {
                                *o += scale * (a - b);
                            }
                        }
                    }
                }
                self.accumulate(grads, *pred, gp);
            }
        }
    }
}

fn col_sum(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

pub(crate) fn rope_apply(x: &Matrix, table: &RopeTable, inverse: bool) -> Matrix {
    let (n, d) = x.shape();
    let pairs = table.pairs();
    let dh = 2 * pairs;
    let heads = d / dh;
    let mut y = Matrix::zeros(n, d);
    for r in 0..n {
        let cr = table.cos.row(r);
        let sr = table.sin.row(r);
        let xr = x.row(r);
        let yr = y.row_mut(r);
        for h in 0..heads {
            for p in 0..pairs {
                let i = h * dh + 2 * p;
                let (a, b) = (xr[i], xr[i + 1]);
                let (c, s) = (cr[p], if inverse { -sr[p] } else { sr[p] });
                yr[i] = a * c - b * s;
                yr[i + 1] = a * s + b * c;
            }
        }
    }
    y
}

fn chunk_ranges(n: usize, chunk: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(chunk))
        .map(|c| (c * chunk, ((c + 1) * chunk).min(n)))
        .collect()
}

/// Scores `S = scale * Q_h K_h^T` for query rows `r0..r1` of head `h`,
/// written into `s` (`(r1 - r0) x m`).
fn head_scores(q: &Matrix, k: &Matrix, h: usize, dh: usize, r0: usize, r1: usize, scale: f64, s: &mut [f64]) {
    let d = q.cols();
    let m = k.rows();
    gemm_raw(
        scale,
        &q.as_slice()[r0 * d + h * dh..],
        d,
        Trans::No,
        &k.as_slice()[h * dh..],
        d,
        Trans::Yes,
        0.0,
        s,
        r1 - r0,
        dh,
        m,
    );
}

fn attention_forward(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, chunk: usize) -> (Matrix, Matrix) {
    let (n, d) = q.shape();
    let m = k.rows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let ranges = chunk_ranges(n, chunk.max(1));
    let blocks: Vec<(Vec<f64>, Vec<f64>)> = ranges
        .par_iter()
        .map(|&(r0, r1)| {
            let c = r1 - r0;
            let mut out = vec![0.0; c * d];
            let mut lse = vec![0.0; c * heads];
            let mut s = vec![0.0; c * m];
            let mut o = vec![0.0; c * dh];
            for h in 0..heads {
                head_scores(q, k, h, dh, r0, r1, scale, &mut s);
                for i in 0..c {
                    let row = &mut s[i * m..(i + 1) * m];
                    lse[i * heads + h] = softmax_in_place(row);
                }
                gemm_raw(1.0, &s, m, Trans::No, &v.as_slice()[h * dh..], d, Trans::No, 0.0, &mut o, c, m, dh);
                for i in 0..c {
                    out[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&o[i * dh..(i + 1) * dh]);
                }
            }
            (out, lse)
        })
        .collect();
    let mut out = Matrix::zeros(n, d);
    let mut lse = Matrix::zeros(n, heads);
    for (&(r0, r1), (ob, lb)) in ranges.iter().zip(blocks) {
        out.as_mut_slice()[r0 * d..r1 * d].copy_from_slice(&ob);
        lse.as_mut_slice()[r0 * heads..r1 * heads].copy_from_slice(&lb);
    }
    (out, lse)
}

/// Stable softmax of one row in place; returns its log-sum-exp.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
    mx + sum.ln()
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    out: &Matrix,
    lse: &Matrix,
    gy: &Matrix,
    heads: usize,
    chunk: usize,
) -> (Matrix, Matrix, Matrix) {
    let (n, d) = q.shape();
    let m = k.rows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let ranges = chunk_ranges(n, chunk.max(1));
    let parts: Vec<(Vec<f64>, Matrix, Matrix)> = ranges
        .par_iter()
        .map(|&(r0, r1)| {
            let c = r1 - r0;
            let mut gq = vec![0.0; c * d];
            let mut gk = Matrix::zeros(m, d);
            let mut gv = Matrix::zeros(m, d);
            let mut p = vec![0.0; c * m];
            let mut dp = vec![0.0; c * m];
            let mut tmp = vec![0.0; c.max(m) * dh];
            for h in 0..heads {
                head_scores(q, k, h, dh, r0, r1, scale, &mut p);
                for i in 0..c {
                    let l = lse.get(r0 + i, h);
                    for x in &mut p[i * m..(i + 1) * m] {
                        *x = (*x - l).exp();
                    }
                }
                // dV_h += P^T dO_h
                gemm_raw(1.0, &p, m, Trans::Yes, &gy.as_slice()[r0 * d + h * dh..], d, Trans::No, 0.0, &mut tmp, m, c, dh);
                for j in 0..m {
                    gv.row_mut(j)[h * dh..(h + 1) * dh].copy_from_slice(&tmp[j * dh..(j + 1) * dh]);
                }
                // dP = dO_h V_h^T
                gemm_raw(1.0, &gy.as_slice()[r0 * d + h * dh..], d, Trans::No, &v.as_slice()[h * dh..], d, Trans::Yes, 0.0, &mut dp, c, dh, m);
                for i in 0..c {
                    let go = &gy.row(r0 + i)[h * dh..(h + 1) * dh];
                    let oo = &out.row(r0 + i)[h * dh..(h + 1) * dh];
                    let dot: f64 = go.iter().zip(oo).map(|(a, b)| a * b).sum();
                    for (dpx, px) in dp[i * m..(i + 1) * m].iter_mut().zip(&p[i * m..(i + 1) * m]) {
                        *dpx = px * (*dpx - dot);
                    }
                }
                // dQ_h = scale dS K_h
                gemm_raw(scale, &dp, m, Trans::No, &k.as_slice()[h * dh..], d, Trans::No, 0.0, &mut tmp, c, m, dh);
                for i in 0..c {
                    gq[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&tmp[i * dh..(i + 1) * dh]);
                }
                // dK_h = scale dS^T Q_h
                gemm_raw(scale, &dp, m, Trans::Yes, &q.as_slice()[r0 * d + h * dh..], d, Trans::No, 0.0, &mut tmp, m, c, dh);
                for j in 0..m {
                    gk.row_mut(j)[h * dh..(h + 1) * dh].copy_from_slice(&tmp[j * dh..(j + 1) * dh]);
                }
            }
            (gq, gk, gv)
        })
        .collect();
    let mut gq = Matrix::zeros(n, d);
    let mut gk = Matrix::zeros(m, d);
    let mut gv = Matrix::zeros(m, d);
    for (&(r0, r1), (bq, bk, bv)) in ranges.iter().zip(parts) {
        gq.as_mut_slice()[r0 * d..r1 * d].copy_from_slice(&bq);
        gk.add_assign(&bk);
        gv.add_assign(&bv);
    }
    (gq, gk, gv)
}
