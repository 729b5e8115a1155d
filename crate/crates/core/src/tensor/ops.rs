//! Differentiable primitives: forward evaluation on the tape and the
//! matching vector-Jacobian products.

use std::str::FromStr;

use super::kernels::{
    broadcast_strides, col2im, for_each_strided, gemm, im2col, strides, MatLayout,
};
use super::tape::{Node, Tape, Var};
use super::{numel, Element};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpMode {
    Nearest,
    Bilinear,
}

impl FromStr for InterpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(InterpMode::Nearest),
            "bilinear" => Ok(InterpMode::Bilinear),
            other => Err(Error::invalid(format!("unknown interpolation mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for InterpMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InterpMode::Nearest => "nearest",
            InterpMode::Bilinear => "bilinear",
        })
    }
}

pub(crate) enum Op<E: Element> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    Silu(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Conv2d { x: Var, w: Var, stride: usize },
    LayerNorm { x: Var, rstd: Vec<E> },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<E> },
    L2Normalize { x: Var, rnorm: Vec<E> },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Interpolate { x: Var, rows: Vec<AxisTap>, cols: Vec<AxisTap> },
}

/// Two-tap linear resampling weights along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisTap {
    i0: usize,
    i1: usize,
    w1: f64,
}

fn axis_taps(n_in: usize, n_out: usize, mode: InterpMode) -> Vec<AxisTap> {
    (0..n_out)
        .map(|o| match mode {
            InterpMode::Nearest => {
                let src = (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize)
                    .min(n_in - 1);
                AxisTap { i0: src, i1: src, w1: 0.0 }
            }
            InterpMode::Bilinear => {
                // corner-aligned grid: output ends map exactly onto input ends
                let pos = if n_out == 1 {
                    (n_in - 1) as f64 / 2.0
                } else {
                    o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
                };
                let i0 = (pos.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                let w1 = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
                AxisTap { i0, i1, w1 }
            }
        })
        .collect()
}

fn sigmoid<E: Element>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

/// Leading batch extent plus the trailing matrix extents of a tensor.
fn split_matrix(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    let n = shape.len();
    Some((numel(&shape[..n - 2]), shape[n - 2], shape[n - 1]))
}

fn add_into<E: Element>(dst: &mut [E], src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<E: Element> Tape<E> {
    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(E, E) -> E) -> Result<(Vec<usize>, Vec<E>)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        let bs = broadcast_strides(&sa, sb).ok_or_else(|| {
            Error::shape(name, format!("cannot broadcast {:?} onto {:?}", sb, sa))
        })?;
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(av.len());
        if sa.as_slice() == sb {
            out.extend(av.iter().zip(bv).map(|(&x, &y)| f(x, y)));
        } else {
            for_each_strided(&sa, &bs, 0, |i, j| out.push(f(av[i], bv[j])));
        }
        Ok((sa, out))
    }

    /// Elementwise `a + b`; `b` broadcasts onto `a` (right-aligned, extents 1 or equal).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(shape, out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(shape, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = E::from_f64(c);
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, c), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("identical shapes")
    }

    /// `x * sigmoid(x)`
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Silu(x), &[x])
    }

    /// Matrix product over the last two axes.
    ///
    /// `a: [.., m, k]`; `b` is either `[k, n]` (shared across the batch) or
    /// `[.., k, n]` with the same leading extents as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T` over the last two axes; `b: [.., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k) = split_matrix(&sa)
            .ok_or_else(|| Error::shape("matmul", format!("lhs {:?} has rank < 2", sa)))?;
        let (bbatch, r, c) = split_matrix(&sb)
            .ok_or_else(|| Error::shape("matmul", format!("rhs {:?} has rank < 2", sb)))?;
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if kb != k {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {:?} x {:?}{}", sa, sb, if trans_b { "^T" } else { "" }),
            ));
        }
        let shared = sb.len() == 2;
        if !shared && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(Error::shape(
                "matmul",
                format!("batch extents differ: {:?} vs {:?}", sa, sb),
            ));
        }
        let lb = if trans_b {
            MatLayout::transposed(n, k)
        } else {
            MatLayout::row_major(k, n)
        };
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![E::zero(); batch * m * n];
        if shared {
            gemm(av, MatLayout::row_major(batch * m, k), bv, lb, &mut out, false);
        } else {
            debug_assert_eq!(bbatch, batch);
            for i in 0..batch {
                gemm(
                    &av[i * m * k..(i + 1) * m * k],
                    MatLayout::row_major(m, k),
                    &bv[i * k * n..(i + 1) * k * n],
                    lb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(shape, out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// 3x3 cross-correlation with padding 1. `x: [b, c, h, w]`, `w: [o, c, 3, 3]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {:?} is not rank 4", sx)));
        }
        if sw.len() != 4 || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::shape("conv2d", format!("kernel {:?} is not [o, c, 3, 3]", sw)));
        }
        if sw[1] != sx[1] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {} channels, input has {}", sw[1], sx[1]),
            ));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::invalid(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let o = sw[0];
        let oh = (h + 2 - 3) / stride + 1;
        let ow = (wd + 2 - 3) / stride + 1;
        let plane = oh * ow;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut cols = vec![E::zero(); c * 9 * plane];
        let mut out = vec![E::zero(); b * o * plane];
        for bi in 0..b {
            im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, stride, oh, ow, &mut cols);
            gemm(
                wv,
                MatLayout::row_major(o, c * 9),
                &cols,
                MatLayout::row_major(c * 9, plane),
                &mut out[bi * o * plane..(bi + 1) * o * plane],
                false,
            );
        }
        Ok(self.push(vec![b, o, oh, ow], out, Op::Conv2d { x, w, stride }, &[x, w]))
    }

    /// Normalizes to zero mean and unit variance along the last axis (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d < 2 {
            return Err(Error::shape(
                "layer_norm",
                format!("normalized extent must be >= 2, shape {:?}", shape),
            ));
        }
        let xv = self.value(x);
        let rows = xv.len() / d;
        let eps = E::from_f64(eps);
        let inv_d = E::from_f64(1.0 / d as f64);
        let mut out = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in xv.chunks_exact(d) {
            let mean = row.iter().copied().sum::<E>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv_d;
            let r = E::one() / (var + eps).sqrt();
            rstd.push(r);
            out.extend(row.iter().map(|&v| (v - mean) * r));
        }
        Ok(self.push(shape, out, Op::LayerNorm { x, rstd }, &[x]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(d) {
            softmax_row(row);
        }
        Ok(self.push(shape, out, Op::Softmax(x), &[x]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits: [n, k]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} vs {} targets", shape, targets.len()),
            ));
        }
        let k = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!("target {bad} >= {k} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = E::zero();
        for (row, &t) in probs.chunks_exact_mut(k).zip(targets) {
            softmax_row(row);
            loss = loss - row[t].ln();
        }
        let loss = loss / E::from_f64(targets.len() as f64);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// `x / sqrt(sum(x^2) + eps)` along the last axis.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("l2_normalize", "scalar input"))?;
        let eps = E::from_f64(eps);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len());
        let mut rnorm = Vec::with_capacity(xv.len() / d.max(1));
        for row in xv.chunks_exact(d) {
            let r = E::one() / (row.iter().map(|&v| v * v).sum::<E>() + eps).sqrt();
            rnorm.push(r);
            out.extend(row.iter().map(|&v| v * r));
        }
        Ok(self.push(shape, out, Op::L2Normalize { x, rnorm }, &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {:?}", base)));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} incompatible with {:?} along axis {axis}", s, base),
                ));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) along axis {axis} of {:?}", start + len, sx),
            ));
        }
        let outer = numel(&sx[..axis]);
        let inner = numel(&sx[axis + 1..]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sx[axis] + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(x), shape),
            ));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{:?} is not a permutation of {:?}", perm, sx)));
        }
        let in_strides = strides(&sx);
        let shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len());
        for_each_strided(&shape, &src, 0, |_, j| out.push(xv[j]));
        Ok(self.push(
            shape,
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<E>();
        self.push(vec![], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.value(x).iter().copied().sum::<E>() / E::from_f64(n as f64);
        self.push(vec![], vec![s], Op::Mean(x), &[x])
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx
            .last()
            .ok_or_else(|| Error::shape("sum_last", "scalar input"))?;
        let out = self
            .value(x)
            .chunks_exact(d)
            .map(|r| r.iter().copied().sum::<E>())
            .collect();
        Ok(self.push(sx[..sx.len() - 1].to_vec(), out, Op::SumLast(x), &[x]))
    }

    /// Row lookup: `table: [v, d]` -> `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::shape("embedding", format!("table {:?} is not rank 2", st)));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= st[0]) {
            return Err(Error::invalid(format!("embedding id {bad} >= table size {}", st[0])));
        }
        let d = st[1];
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Spatial resampling of `x: [b, c, h, w]` to `[b, c, out_h, out_w]`.
    pub fn interpolate2d(&mut self, x: Var, out_h: usize, out_w: usize, mode: InterpMode) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::shape("interpolate2d", format!("input {:?} is not rank 4", sx)));
        }
        if out_h == 0 || out_w == 0 || sx[2] == 0 || sx[3] == 0 {
            return Err(Error::invalid("interpolate2d extents must be >= 1"));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let rows = axis_taps(h, out_h, mode);
        let cols = axis_taps(w, out_w, mode);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(b * c * out_h * out_w);
        for plane in xv.chunks_exact(h * w) {
            for r in &rows {
                let (wr0, wr1) = (E::from_f64(1.0 - r.w1), E::from_f64(r.w1));
                for cl in &cols {
                    let (wc0, wc1) = (E::from_f64(1.0 - cl.w1), E::from_f64(cl.w1));
                    let top = plane[r.i0 * w + cl.i0] * wc0 + plane[r.i0 * w + cl.i1] * wc1;
                    let bot = plane[r.i1 * w + cl.i0] * wc0 + plane[r.i1 * w + cl.i1] * wc1;
                    out.push(top * wr0 + bot * wr1);
                }
            }
        }
        debug_assert_eq!(out.len(), b * c * out_h * out_w);
        Ok(self.push(vec![b, c, out_h, out_w], out, Op::Interpolate { x, rows, cols }, &[x]))
    }

    /// Scaled dot-product attention over `[b, heads, n, d]` operands.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        Ok(self.attention_with_weights(q, k, v)?.0)
    }

    /// As [`Tape::attention`], also returning the softmax weights `[b, heads, nq, nk]`.
    pub fn attention_with_weights(&mut self, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 4 || sk.len() != 4 || sv.len() != 4 {
            return Err(Error::shape("attention", "operands must be rank 4 [b, heads, n, d]"));
        }
        if sq[..2] != sk[..2] || sk[..2] != sv[..2] {
            return Err(Error::shape(
                "attention",
                format!("batch/head extents differ: q {:?} k {:?} v {:?}", sq, sk, sv),
            ));
        }
        if sq[3] != sk[3] {
            return Err(Error::shape("attention", format!("q/k feature extents differ: {:?} vs {:?}", sq, sk)));
        }
        if sk[2] != sv[2] {
            return Err(Error::shape("attention", format!("k/v token counts differ: {:?} vs {:?}", sk, sv)));
        }
        let scores = self.matmul_nt(q, k)?;
        let scores = self.scale(scores, 1.0 / (sq[3] as f64).sqrt());
        let weights = self.softmax(scores)?;
        let out = self.matmul(weights, v)?;
        Ok((out, weights))
    }
}

fn softmax_row<E: Element>(row: &mut [E]) {
    let m = row.iter().copied().fold(E::neg_infinity(), E::max);
    let mut s = E::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

fn grad_buf<'g, E: Element>(
    nodes: &[Node<E>],
    grads: &'g mut [Option<Vec<E>>],
    v: Var,
) -> Option<&'g mut Vec<E>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![E::zero(); n]))
}

/// Adds the vector-Jacobian product of node `i` with `g` into its inputs.
pub(crate) fn propagate<E: Element>(nodes: &[Node<E>], i: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let negate = matches!(node.op, Op::Sub(..));
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                add_into(ga, g);
            }
            let sb = nodes[b.0].shape.clone();
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                let sign = if negate { -E::one() } else { E::one() };
                if sb == node.shape {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d += sign * s;
                    }
                } else {
                    let bs = broadcast_strides(&node.shape, &sb).expect("checked in forward");
                    for_each_strided(&node.shape, &bs, 0, |o, j| gb[j] += sign * g[o]);
                }
            }
        }
        Op::Mul(a, b) => {
            let sb = &nodes[b.0].shape;
            let same = *sb == node.shape;
            let bs = if same {
                None
            } else {
                Some(broadcast_strides(&node.shape, sb).expect("checked in forward"))
            };
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            if nodes[a.0].requires_grad {
                let mut contrib = vec![E::zero(); av.len()];
                match &bs {
                    None => contrib.iter_mut().zip(g.iter().zip(bv)).for_each(|(c, (&g, &y))| *c = g * y),
                    Some(bs) => for_each_strided(&node.shape, bs, 0, |o, j| contrib[o] = g[o] * bv[j]),
                }
                add_into(grad_buf(nodes, grads, *a).unwrap(), &contrib);
            }
            if nodes[b.0].requires_grad {
                let mut contrib = vec![E::zero(); bv.len()];
                match &bs {
                    None => contrib.iter_mut().zip(g.iter().zip(av)).for_each(|(c, (&g, &x))| *c = g * x),
                    Some(bs) => for_each_strided(&node.shape, bs, 0, |o, j| contrib[j] += g[o] * av[o]),
                }
                add_into(grad_buf(nodes, grads, *b).unwrap(), &contrib);
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d += s * *c;
                }
            }
        }
        Op::Silu(x) => {
            let xv = &nodes[x.0].value;
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xv) {
                    let sg = sigmoid(v);
                    *d += s * sg * (E::one() + v * (E::one() - sg));
                }
            }
        }
        Op::MatMul { a, b, trans_b } => {
            let sa = &nodes[a.0].shape;
            let sb = &nodes[b.0].shape;
            let (batch, m, k) = split_matrix(sa).unwrap();
            let n = *node.shape.last().unwrap();
            let shared = sb.len() == 2;
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            // dA = dC * B^T   (or dC * B when b is stored transposed)
            if nodes[a.0].requires_grad {
                let lb = if *trans_b {
                    MatLayout::row_major(n, k)
                } else {
                    MatLayout::transposed(k, n)
                };
                let ga = grad_buf(nodes, grads, *a).unwrap();
                if shared {
                    gemm(g, MatLayout::row_major(batch * m, n), bv, lb, ga, true);
                } else {
                    for i in 0..batch {
                        gemm(
                            &g[i * m * n..(i + 1) * m * n],
                            MatLayout::row_major(m, n),
                            &bv[i * k * n..(i + 1) * k * n],
                            lb,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                }
            }
            // dB = A^T * dC   (or dC^T * A when b is stored transposed)
            if nodes[b.0].requires_grad {
                let gb = grad_buf(nodes, grads, *b).unwrap();
                let (rows, blocks) = if shared { (batch * m, 1) } else { (m, batch) };
                for i in 0..blocks {
                    let ai = &av[i * rows * k..(i + 1) * rows * k];
                    let gi = &g[i * rows * n..(i + 1) * rows * n];
                    let dst = &mut gb[i * k * n * (!shared as usize)..][..k * n];
                    if *trans_b {
                        gemm(gi, MatLayout::transposed(rows, n), ai, MatLayout::row_major(rows, k), dst, true);
                    } else {
                        gemm(ai, MatLayout::transposed(rows, k), gi, MatLayout::row_major(rows, n), dst, true);
                    }
                }
            }
        }
        Op::Conv2d { x, w, stride } => {
            let sx = &nodes[x.0].shape;
            let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let (o, oh, ow) = (node.shape[1], node.shape[2], node.shape[3]);
            let plane = oh * ow;
            let xv = &nodes[x.0].value;
            let wv = &nodes[w.0].value;
            let need_x = nodes[x.0].requires_grad;
            let need_w = nodes[w.0].requires_grad;
            let mut cols = vec![E::zero(); c * 9 * plane];
            let mut dw = vec![E::zero(); if need_w { wv.len() } else { 0 }];
            let mut dx = vec![E::zero(); if need_x { xv.len() } else { 0 }];
            for bi in 0..b {
                let gy = &g[bi * o * plane..(bi + 1) * o * plane];
                if need_w {
                    im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, *stride, oh, ow, &mut cols);
                    gemm(gy, MatLayout::row_major(o, plane), &cols, MatLayout::transposed(c * 9, plane), &mut dw, true);
                }
                if need_x {
                    gemm(wv, MatLayout::transposed(o, c * 9), gy, MatLayout::row_major(o, plane), &mut cols, false);
                    col2im(&cols, c, h, wd, *stride, oh, ow, &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd]);
                }
            }
            if need_w {
                add_into(grad_buf(nodes, grads, *w).unwrap(), &dw);
            }
            if need_x {
                add_into(grad_buf(nodes, grads, *x).unwrap(), &dx);
            }
        }
        Op::LayerNorm { x, rstd } => {
            let d = *node.shape.last().unwrap();
            let inv_d = E::from_f64(1.0 / d as f64);
            let y = &node.value;
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (r, &rs) in rstd.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                    let mean_g = gr.iter().copied().sum::<E>() * inv_d;
                    let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<E>() * inv_d;
                    for ((dst, &gv), &yv) in gx[span].iter_mut().zip(gr).zip(yr) {
                        *dst += rs * (gv - mean_g - yv * mean_gy);
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let d = *node.shape.last().unwrap();
            let y = &node.value;
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((dst, yr), gr) in gx.chunks_exact_mut(d).zip(y.chunks_exact(d)).zip(g.chunks_exact(d)) {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<E>();
                    for ((o, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                        *o += yv * (gv - dot);
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let k = nodes[logits.0].shape[1];
            let scale = g[0] / E::from_f64(targets.len() as f64);
            if let Some(gl) = grad_buf(nodes, grads, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == t { E::one() } else { E::zero() };
                        gl[r * k + j] += scale * (probs[r * k + j] - onehot);
                    }
                }
            }
        }
        Op::L2Normalize { x, rnorm } => {
            let d = *node.shape.last().unwrap();
            let y = &node.value;
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (r, &rn) in rnorm.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let dot = g[span.clone()].iter().zip(&y[span.clone()]).map(|(&a, &b)| a * b).sum::<E>();
                    for ((dst, &gv), &yv) in gx[span.clone()].iter_mut().zip(&g[span.clone()]).zip(&y[span]) {
                        *dst += rn * (gv - yv * dot);
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let outer = numel(&node.shape[..*axis]);
            let inner = numel(&node.shape[axis + 1..]);
            let total = node.shape[*axis] * inner;
            let mut offset = 0;
            for &v in inputs {
                let block = nodes[v.0].shape[*axis] * inner;
                if let Some(gv) = grad_buf(nodes, grads, v) {
                    for o in 0..outer {
                        add_into(&mut gv[o * block..(o + 1) * block], &g[o * total + offset..][..block]);
                    }
                }
                offset += block;
            }
        }
        Op::Narrow { x, axis, start } => {
            let sx = &nodes[x.0].shape;
            let outer = numel(&sx[..*axis]);
            let inner = numel(&sx[axis + 1..]);
            let len = node.shape[*axis];
            let ext = sx[*axis];
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for o in 0..outer {
                    let base = (o * ext + start) * inner;
                    add_into(&mut gx[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                add_into(gx, g);
            }
        }
        Op::Permute { x, perm } => {
            let in_strides = strides(&nodes[x.0].shape);
            let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for_each_strided(&node.shape, &src, 0, |o, j| gx[j] += g[o]);
            }
        }
        Op::Sum(x) | Op::Mean(x) => {
            let n = nodes[x.0].value.len();
            let s = if matches!(node.op, Op::Mean(_)) {
                g[0] / E::from_f64(n.max(1) as f64)
            } else {
                g[0]
            };
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::SumLast(x) => {
            let d = *nodes[x.0].shape.last().unwrap();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (row, &gv) in gx.chunks_exact_mut(d).zip(g) {
                    row.iter_mut().for_each(|v| *v += gv);
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = nodes[table.0].shape[1];
            if let Some(gt) = grad_buf(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::Interpolate { x, rows, cols } => {
            let sx = &nodes[x.0].shape;
            let (h, w) = (sx[2], sx[3]);
            let (oh, ow) = (rows.len(), cols.len());
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (plane, gp) in gx.chunks_exact_mut(h * w).zip(g.chunks_exact(oh * ow)) {
                    for (ri, r) in rows.iter().enumerate() {
                        let (wr0, wr1) = (E::from_f64(1.0 - r.w1), E::from_f64(r.w1));
                        for (ci, cl) in cols.iter().enumerate() {
                            let (wc0, wc1) = (E::from_f64(1.0 - cl.w1), E::from_f64(cl.w1));
                            let gv = gp[ri * ow + ci];
                            plane[r.i0 * w + cl.i0] += gv * wr0 * wc0;
                            plane[r.i0 * w + cl.i1] += gv * wr0 * wc1;
                            plane[r.i1 * w + cl.i0] += gv * wr1 * wc0;
                            plane[r.i1 * w + cl.i1] += gv * wr1 * wc1;
                        }
                    }
                }
            }
        }
    }
}
