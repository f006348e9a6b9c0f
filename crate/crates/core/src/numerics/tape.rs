//! Minimal reverse-mode tape over [`Tensor2`] values.
//!
//! Parameters are borrowed from the caller and never copied onto the tape;
//! only intermediate values are stored. Nodes that cannot reach a trainable
//! leaf are skipped during the reverse sweep.

use crate::error::{shape_err, Error, Result};

use super::ops::{self, AttnMask};
use super::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index into a parameter slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Work counters accumulated by every attention call on a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttnStats {
    pub calls: u64,
    pub query_tokens: u64,
    pub key_tokens: u64,
    /// Multiply-accumulates of the score and value products.
    pub macs: u64,
}

impl AttnStats {
    pub fn merge(&mut self, other: &AttnStats) {
        self.calls += other.calls;
        self.query_tokens += other.query_tokens;
        self.key_tokens += other.key_tokens;
        self.macs += other.macs;
    }
}

enum Op {
    Param(usize),
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    RmsNorm { x: Var, gain: Var, inv: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, probs: Vec<Tensor2> },
    Rope { x: Var, positions: Vec<f64>, heads: usize, base: f64 },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    MeanRows(Var),
    Gather { table: Var, ids: Vec<usize> },
    Mse { pred: Var, target: Tensor2 },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor2 },
    SumSquares(Var),
}

struct Node {
    value: Option<Tensor2>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p [Tensor2],
    frozen: Option<&'p [bool]>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
    pub stats: AttnStats,
}

pub struct Grads {
    params: Vec<Option<Tensor2>>,
    nodes: Vec<Option<Tensor2>>,
}

impl Grads {
    pub fn param(&self, id: ParamId) -> Option<&Tensor2> {
        self.params[id.0].as_ref()
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor2> {
        self.nodes[v.0].as_ref()
    }

    /// Adds every parameter gradient into `into` (one tensor per parameter).
    pub fn add_params_into(&self, into: &mut [Tensor2]) -> Result<()> {
        if into.len() != self.params.len() {
            return shape_err(format!("{} accumulators for {} parameters", into.len(), self.params.len()));
        }
        for (acc, g) in into.iter_mut().zip(&self.params) {
            if let Some(g) = g {
                if acc.shape() != g.shape() {
                    return shape_err(format!("accumulator {:?} vs gradient {:?}", acc.shape(), g.shape()));
                }
                acc.add_assign(g);
            }
        }
        Ok(())
    }

    /// Per-parameter gradients, zero-filled where a parameter was unused.
    pub fn into_param_grads(self, params: &[Tensor2]) -> Vec<Tensor2> {
        self.params
            .into_iter()
            .zip(params)
            .map(|(g, p)| g.unwrap_or_else(|| Tensor2::zeros(p.rows(), p.cols())))
            .collect()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor2]) -> Self {
        Self { params, frozen: None, param_vars: vec![None; params.len()], nodes: Vec::new(), stats: AttnStats::default() }
    }

    /// Parameters flagged `true` in `frozen` are treated as constants.
    pub fn with_frozen(params: &'p [Tensor2], frozen: &'p [bool]) -> Self {
        let mut t = Self::new(params);
        t.frozen = Some(frozen);
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => &self.params[*i],
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor2, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let needs_grad = !self.frozen.is_some_and(|f| f[id.0]);
        self.nodes.push(Node { value: None, op: Op::Param(id.0), needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Constant input; gradients are not propagated into it.
    pub fn constant(&mut self, t: Tensor2) -> Var {
        self.nodes.push(Node { value: Some(t), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Grads::wrt`].
    pub fn input(&mut self, t: Tensor2) -> Var {
        self.nodes.push(Node { value: Some(t), op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Broadcast-adds the `1×c` tensor `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(row))?;
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Linear layer `x·w (+ b)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let g = self.value(gain);
        if g.rows() != 1 {
            return shape_err("rms_norm gain must be a row vector");
        }
        let (out, inv) = ops::rms_norm(self.value(x), g.data())?;
        Ok(self.push(out, Op::RmsNorm { x, gain, inv }, &[x, gain]))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&AttnMask>, heads: usize) -> Result<Var> {
        let (out, probs) = ops::multi_head_attention(self.value(q), self.value(k), self.value(v), mask, heads)?;
        let (tq, d) = self.value(q).shape();
        let tk = self.value(k).rows();
        self.stats.calls += 1;
        self.stats.query_tokens += tq as u64;
        self.stats.key_tokens += tk as u64;
        self.stats.macs += (tq * tk * (d + self.value(v).cols())) as u64;
        Ok(self.push(out, Op::Attention { q, k, v, probs }, &[q, k, v]))
    }

    pub fn rope(&mut self, x: Var, positions: &[f64], heads: usize, base: f64) -> Result<Var> {
        let out = ops::rope(self.value(x), positions, heads, base, 1.0)?;
        Ok(self.push(out, Op::Rope { x, positions: positions.to_vec(), heads, base }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor2> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor2::concat_rows(&vals)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return shape_err("concat_cols: differing row counts");
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() {
            return shape_err(format!("slice {start}..{} of {} rows", start + len, t.rows()));
        }
        let out = t.slice_rows(start, len);
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rows() == 0 {
            return Err(Error::Invalid("mean over zero rows".into()));
        }
        let out = self.value(x).mean_rows();
        Ok(self.push(out, Op::MeanRows(x), &[x]))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Tensor2::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(Error::Invalid(format!("token id {id} outside table of {}", t.rows())));
            }
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Mean squared error against a constant target (1×1 result).
    pub fn mse(&mut self, pred: Var, target: &Tensor2) -> Result<Var> {
        let diff = self.value(pred).sub(target)?;
        let n = diff.data().len().max(1) as f64;
        let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
        Ok(self.push(Tensor2::filled(1, 1, loss), Op::Mse { pred, target: target.clone() }, &[pred]))
    }

    /// Mean cross entropy of `logits` rows against `targets` (1×1 result).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), targets)?;
        Ok(self.push(
            Tensor2::filled(1, 1, loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        ))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor2::filled(1, 1, s), Op::SumSquares(x), &[x])
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    /// Reverse sweep from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).shape() != (1, 1) {
            return shape_err("backward needs a scalar loss");
        }
        self.value(loss).ensure_finite("loss")?;
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor2>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let send = |v: Var, t: Tensor2, grads: &mut Vec<Option<Tensor2>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            let need = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Param(i) => {
                    match &mut param_grads[*i] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g.clone()),
                    }
                }
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if need(*a) {
                        send(*a, g.matmul_t(self.value(*b))?, &mut grads);
                    }
                    if need(*b) {
                        send(*b, self.value(*a).t_matmul(&g)?, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g.clone(), &mut grads);
                }
                Op::AddRow(a, row) => {
                    if need(*row) {
                        let mut s = g.mean_rows();
                        s = s.scale(g.rows() as f64);
                        send(*row, s, &mut grads);
                    }
                    send(*a, g.clone(), &mut grads);
                }
                Op::Mul(a, b) => {
                    if need(*a) {
                        send(*a, g.zip(self.value(*b), |x, y| x * y)?, &mut grads);
                    }
                    if need(*b) {
                        send(*b, g.zip(self.value(*a), |x, y| x * y)?, &mut grads);
                    }
                }
                Op::Scale(a, s) => send(*a, g.scale(*s), &mut grads),
                Op::Gelu(a) => {
                    let d = g.zip(self.value(*a), |gy, x| gy * ops::gelu_grad(x))?;
                    send(*a, d, &mut grads);
                }
                Op::RmsNorm { x, gain, inv } => {
                    let gv = self.value(*gain);
                    let (dx, dg) = ops::rms_norm_backward(self.value(*x), gv.data(), inv, &g);
                    send(*x, dx, &mut grads);
                    send(*gain, Tensor2::row_vector(&dg), &mut grads);
                }
                Op::Attention { q, k, v, probs } => {
                    let (dq, dk, dv) = ops::multi_head_attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        &g,
                    );
                    send(*q, dq, &mut grads);
                    send(*k, dk, &mut grads);
                    send(*v, dv, &mut grads);
                }
                Op::Rope { x, positions, heads, base } => {
                    send(*x, ops::rope(&g, positions, *heads, *base, -1.0)?, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).rows();
                        if need(p) {
                            send(p, g.slice_rows(off, n), &mut grads);
                        }
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        if need(p) {
                            let mut t = Tensor2::zeros(g.rows(), c);
                            for r in 0..g.rows() {
                                t.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                            }
                            send(p, t, &mut grads);
                        }
                        off += c;
                    }
                }
                Op::SliceRows { x, start } => {
                    let src = self.value(*x);
                    let mut t = Tensor2::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        t.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    send(*x, t, &mut grads);
                }
                Op::MeanRows(x) => {
                    let n = self.value(*x).rows();
                    let mut t = Tensor2::zeros(n, g.cols());
                    for r in 0..n {
                        for (o, gv) in t.row_mut(r).iter_mut().zip(g.data()) {
                            *o = gv / n as f64;
                        }
                    }
                    send(*x, t, &mut grads);
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let mut t = Tensor2::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, gv) in t.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                    send(*table, t, &mut grads);
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let n = p.data().len().max(1) as f64;
                    let s = g.data()[0] * 2.0 / n;
                    send(*pred, p.zip(target, |a, b| s * (a - b))?, &mut grads);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let s = g.data()[0] / targets.len().max(1) as f64;
                    let mut t = probs.clone();
                    for (r, &tgt) in targets.iter().enumerate() {
                        let v = t.get(r, tgt);
                        t.set(r, tgt, v - 1.0);
                    }
                    send(*logits, t.scale(s), &mut grads);
                }
                Op::SumSquares(x) => {
                    let s = g.data()[0] * 2.0;
                    send(*x, self.value(*x).scale(s), &mut grads);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Grads { params: param_grads, nodes: grads })
    }
}
