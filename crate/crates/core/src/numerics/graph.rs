//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are appended
//! after their inputs, so walking the tape backwards is a valid reverse
//! topological order. Parameters enter the tape through [`Graph::param`]; on
//! [`Graph::backward`] their gradients are added into the owning
//! [`ParamStore`].

use super::tensor::{gemm, softmax_in_place};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch geometry for [`Graph::attention`]: `batch` sequences of `seq` rows
/// each, laid out contiguously.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// `batch * seq` flags; `false` keys receive no attention weight.
    pub key_mask: Vec<bool>,
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ReplaceRows {
        base: Var,
        src: Var,
        pairs: Vec<(usize, usize)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    MeanRowGroups {
        src: Var,
        groups: Vec<Vec<usize>>,
    },
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SumAll(Var),
    SumSquares(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-node gradients produced by one backward sweep.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    /// A value that receives no parameter gradient (its node gradient is
    /// still available through [`Grads`]).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .matmul(self.value(b))
            .map_err(|_| self.shape_err("matmul", a, b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err("add", a, b));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(a, s))
    }

    /// `x[r x c] + bias[c]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.numel() != c {
            return Err(self.shape_err("add_row_bias", x, bias));
        }
        let mut out = tx.clone();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                row.iter_mut().zip(tb.data()).for_each(|(o, b)| *o += b);
            }
        }
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    /// Affine map `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu_scalar(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Gelu(x))
    }

    /// Row-wise layer normalization followed by `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if d == 0 || self.value(gain).numel() != d {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.value(bias).numel() != d {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for (r, row) in tx.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(rows * d);
        for row in xhat.chunks(d) {
            out.extend(row.iter().zip(g).zip(b).map(|((xh, g), b)| xh * g + b));
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Selects rows of `src` (an embedding lookup when `src` is a table).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(src);
        let (rows, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::OutOfRange {
                    what: "gather_rows source",
                    index: i,
                    size: rows,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Copy of `base` where, for each `(dst, from)` pair, row `dst` is
    /// replaced by row `from` of `src`. Rows not named keep `base` values;
    /// gradients of replaced rows flow to `src` only.
    pub fn replace_rows(&mut self, base: Var, src: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (tb, ts) = (self.value(base), self.value(src));
        if tb.cols() != ts.cols() {
            return Err(self.shape_err("replace_rows", base, src));
        }
        let mut out = tb.clone();
        for &(dst, from) in pairs {
            if dst >= tb.rows() || from >= ts.rows() {
                return Err(Error::OutOfRange {
                    what: "replace_rows",
                    index: dst.max(from),
                    size: tb.rows().min(ts.rows()),
                });
            }
            out.row_mut(dst).copy_from_slice(ts.row(from));
        }
        Ok(self.push(
            out,
            Op::ReplaceRows {
                base,
                src,
                pairs: pairs.to_vec(),
            },
        ))
    }

    /// Multi-head scaled dot-product attention over a batch of equal-length
    /// sequences. Heads are contiguous column blocks of width `d / heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let rows = layout.batch * layout.seq;
        if tq.rows() != rows || tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return Err(self.shape_err("attention", q, k));
        }
        if layout.heads == 0 || d % layout.heads != 0 {
            return Err(Error::config(format!(
                "d_model {d} is not divisible by {} heads",
                layout.heads
            )));
        }
        if layout.key_mask.len() != rows {
            return Err(Error::invalid("attention mask length does not match batch"));
        }
        let (t, h) = (layout.seq, layout.heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; layout.batch * h * t * t];
        let mut out = vec![0.0; rows * d];
        for b in 0..layout.batch {
            let mask = &layout.key_mask[b * t..(b + 1) * t];
            for head in 0..h {
                let off = head * dh;
                for i in 0..t {
                    let p = &mut probs[((b * h + head) * t + i) * t..][..t];
                    let qi = &qd[(b * t + i) * d + off..][..dh];
                    for j in 0..t {
                        p[j] = if mask[j] {
                            let kj = &kd[(b * t + j) * d + off..][..dh];
                            scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>()
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    softmax_in_place(p);
                    let oi = &mut out[(b * t + i) * d + off..][..dh];
                    for j in 0..t {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let vj = &vd[(b * t + j) * d + off..][..dh];
                        oi.iter_mut().zip(vj).for_each(|(o, x)| *o += p[j] * x);
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        ))
    }

    /// Attention probabilities recorded by an attention node, laid out as
    /// `[batch][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Output row `g` is the mean of `src` rows listed in `groups[g]`.
    pub fn mean_row_groups(&mut self, src: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let t = self.value(src);
        let c = t.cols();
        let mut data = vec![0.0; groups.len() * c];
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                return Err(Error::invalid("empty sequence: nothing to pool"));
            }
            let out = &mut data[g * c..(g + 1) * c];
            for &r in rows {
                if r >= t.rows() {
                    return Err(Error::OutOfRange {
                        what: "mean_row_groups",
                        index: r,
                        size: t.rows(),
                    });
                }
                out.iter_mut().zip(t.row(r)).for_each(|(o, x)| *o += x);
            }
            let n = rows.len() as f64;
            out.iter_mut().for_each(|o| *o /= n);
        }
        let out = Tensor::new(vec![groups.len(), c], data)?;
        Ok(self.push(out, Op::MeanRowGroups { src, groups }))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax_rows();
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let k = t.cols();
        if t.rows() != labels.len() || labels.is_empty() {
            return Err(Error::invalid(format!(
                "cross_entropy: {} logit rows for {} labels",
                t.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::OutOfRange {
                what: "label",
                index: bad,
                size: k,
            });
        }
        let probs = t.softmax_rows().into_data();
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x))
    }

    /// Propagates d(loss)/d(node) through the tape and adds parameter
    /// gradients into `store`. Calling it twice accumulates twice.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads, store)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) -> Result<()> {
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                let p = store.get_mut(*id);
                p.grad.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = G B^T, dB = A^T G
                let ga = acc(grads, *a, m * k);
                gemm(m, n, k, g, (n as isize, 1), tb.data(), (1, n as isize), ga, true);
                let gb = acc(grads, *b, k * n);
                gemm(k, m, n, ta.data(), (1, k as isize), g, (n as isize, 1), gb, true);
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                add_into(acc(grads, *b, g.len()), g);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * tb[i];
                }
                let gb = acc(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * ta[i];
                }
            }
            Op::Scale(a, s) => {
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }
            Op::AddRowBias(x, bias) => {
                add_into(acc(grads, *x, g.len()), g);
                let c = self.value(*bias).numel();
                let gb = acc(grads, *bias, c);
                for row in g.chunks(c) {
                    add_into(gb, row);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * gelu_grad(xv[i]);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).numel();
                let gain_v = self.value(*gain).data().to_vec();
                {
                    let gg = acc(grads, *gain, d);
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * xrow[j];
                        }
                    }
                }
                {
                    let gb = acc(grads, *bias, d);
                    for grow in g.chunks(d) {
                        add_into(gb, grow);
                    }
                }
                let gx = acc(grads, *x, g.len());
                let mut dxhat = vec![0.0; d];
                for (r, (grow, xrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    for j in 0..d {
                        dxhat[j] = grow[j] * gain_v[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    let out = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] += inv_std[r] * (dxhat[j] - mean_d - xrow[j] * mean_dx);
                    }
                }
            }
            Op::GatherRows { src, idx } => {
                let t = self.value(*src);
                let c = t.cols();
                let gs = acc(grads, *src, t.numel());
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut gs[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
            Op::ReplaceRows { base, src, pairs } => {
                let c = self.value(*base).cols();
                let mut gbase = g.to_vec();
                let ns = self.value(*src).numel();
                let gs = acc(grads, *src, ns);
                for &(dst, from) in pairs {
                    add_into(&mut gs[from * c..(from + 1) * c], &g[dst * c..(dst + 1) * c]);
                }
                for &(dst, _) in pairs {
                    gbase[dst * c..(dst + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                }
                add_into(acc(grads, *base, g.len()), &gbase);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, layout, probs, g, grads),
            Op::MeanRowGroups { src, groups } => {
                let t = self.value(*src);
                let c = t.cols();
                let gs = acc(grads, *src, t.numel());
                for (gi, rows) in groups.iter().enumerate() {
                    let n = rows.len() as f64;
                    for &r in rows {
                        let dst = &mut gs[r * c..(r + 1) * c];
                        dst.iter_mut()
                            .zip(&g[gi * c..(gi + 1) * c])
                            .for_each(|(d, x)| *d += x / n);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let gp = acc(grads, p, rows * c);
                    for r in 0..rows {
                        add_into(&mut gp[r * c..(r + 1) * c], &g[r * total + off..r * total + off + c]);
                    }
                    off += c;
                }
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let gx = acc(grads, *x, g.len());
                for ((grow, yrow), out) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.value(*logits).cols();
                let scale = g[0] / labels.len() as f64;
                let gl = acc(grads, *logits, probs.len());
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        gl[r * k + j] += scale * (probs[r * k + j] - onehot);
                    }
                }
            }
            Op::SumAll(x) => {
                let gx = acc(grads, *x, self.value(*x).numel());
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::SumSquares(x) => {
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, xv.len());
                for (gi, xi) in gx.iter_mut().zip(xv) {
                    *gi += 2.0 * xi * g[0];
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let d = self.value(q).cols();
        let (t, h) = (layout.seq, layout.heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = qd.len();
        let mut gq = vec![0.0; n];
        let mut gk = vec![0.0; n];
        let mut gv = vec![0.0; n];
        let mut dp = vec![0.0; t];
        for b in 0..layout.batch {
            for head in 0..h {
                let off = head * dh;
                for i in 0..t {
                    let p = &probs[((b * h + head) * t + i) * t..][..t];
                    let gi = &g[(b * t + i) * d + off..][..dh];
                    for j in 0..t {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &vd[(b * t + j) * d + off..][..dh];
                        dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                        let gvj = &mut gv[(b * t + j) * d + off..][..dh];
                        gvj.iter_mut().zip(gi).for_each(|(o, x)| *o += p[j] * x);
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, c)| a * c).sum();
                    let qi_row = (b * t + i) * d + off;
                    let qi = &qd[qi_row..][..dh];
                    let gqi = &mut gq[qi_row..][..dh];
                    for j in 0..t {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let kj_row = (b * t + j) * d + off;
                        let kj = &kd[kj_row..][..dh];
                        gqi.iter_mut().zip(kj).for_each(|(o, x)| *o += ds * x);
                        let gkj = &mut gk[kj_row..][..dh];
                        gkj.iter_mut().zip(qi).for_each(|(o, x)| *o += ds * x);
                    }
                }
            }
        }
        add_into(acc(grads, q, n), &gq);
        add_into(acc(grads, k, n), &gk);
        add_into(acc(grads, v, n), &gv);
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let y = g.mul(xv, xv).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(x).grad.data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.backward(a, &mut store).is_err());
    }

    #[test]
    fn backward_twice_accumulates_double() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::from_rows(&[vec![0.3, -1.2], vec![0.7, 0.1]]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let wv = g.param(&store, w);
        let y = g.matmul(x, wv).unwrap();
        let y = g.gelu(y);
        let loss = g.sum_squares(y);
        g.backward(loss, &mut store).unwrap();
        let once = store.get(w).grad.clone();
        g.backward(loss, &mut store).unwrap();
        for (a, b) in store.get(w).grad.data().iter().zip(once.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[2, 3]));
        let loss = g.cross_entropy(logits, &[0, 2]).unwrap();
        assert!((g.value(loss).data()[0] - 3f64.ln()).abs() < 1e-15);
        let grads = g.backward(loss, &mut store).unwrap();
        // softmax - onehot, averaged over the batch
        let gl = grads.get(logits).unwrap();
        let third = 1.0 / 3.0;
        let expected = [third - 1.0, third, third, third, third, third - 1.0];
        for (a, e) in gl.iter().zip(expected) {
            assert!((a - e / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_vanishes_for_confident_logits() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::from_rows(&[vec![60.0, 0.0, 0.0]]).unwrap());
        let loss = g.cross_entropy(logits, &[0]).unwrap();
        assert!(g.value(loss).data()[0] < 1e-25);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 3]));
        assert!(g.cross_entropy(logits, &[3]).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[1, 4], 2.5));
        let gain = g.constant(Tensor::filled(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_row_mean_tracks_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, -3.0, 0.5, 7.0]]).unwrap());
        let gain = g.constant(Tensor::filled(&[4], 1.0));
        let bias = g.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let mean = g.value(y).data().iter().sum::<f64>() / 4.0;
        assert!((mean - 0.25).abs() < 1e-12);
    }

    #[test]
    fn masked_keys_get_exactly_zero_weight() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.0]]).unwrap());
        let layout = AttentionLayout {
            batch: 1,
            seq: 3,
            heads: 1,
            key_mask: vec![true, false, true],
        };
        let out = g.attention(q, q, q, layout).unwrap();
        let p = g.attention_probs(out).unwrap();
        for i in 0..3 {
            assert_eq!(p[i * 3 + 1], 0.0);
            assert!((p[i * 3] + p[i * 3 + 2] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn replace_rows_routes_gradient_to_source() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let base = g.constant(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
        let src = g.constant(Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap());
        let r = g.replace_rows(base, src, &[(1, 0)]).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 5.0]);
        let loss = g.sum_squares(r);
        let grads = g.backward(loss, &mut store).unwrap();
        assert_eq!(grads.get(base).unwrap(), &[2.0, 0.0]);
        assert_eq!(grads.get(src).unwrap(), &[10.0, 0.0]);
    }
}
