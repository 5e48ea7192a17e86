use std::fmt;

use super::gemm::{gemm, gemm_acc, transpose, transpose_into};
use super::{check_axis, split_at_axis, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Scale,
    Relu,
    Sigmoid,
    Softmax,
    Mean,
    Max,
    Sum,
    SumAll,
    Concat,
    Narrow,
    Reshape,
    Permute,
    Gather,
    Affine,
    MixAxis,
    BroadcastAdd,
    ScaleAxis,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::Mean,
        OpKind::Max,
        OpKind::Sum,
        OpKind::SumAll,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Gather,
        OpKind::Affine,
        OpKind::MixAxis,
        OpKind::BroadcastAdd,
        OpKind::ScaleAxis,
        OpKind::CrossEntropy,
    ];
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Max,
    Sum,
}

pub(crate) enum Op {
    MatMul { a: Tensor, b: Tensor },
    Add { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Scale { x: Tensor, factor: f64 },
    Relu { x: Tensor },
    Sigmoid { x: Tensor, out: Vec<f64> },
    Softmax { x: Tensor, out: Vec<f64> },
    Reduce { x: Tensor, axis: usize, kind: ReduceKind, argmax: Vec<usize> },
    SumAll { x: Tensor },
    Concat { parts: Vec<Tensor>, axis: usize },
    Narrow { x: Tensor, axis: usize, start: usize },
    Reshape { x: Tensor },
    Permute { x: Tensor, perm: Vec<usize> },
    Gather { x: Tensor, axis: usize, index: Vec<usize> },
    Affine { x: Tensor, w: Tensor, b: Tensor },
    MixAxis { m: Tensor, x: Tensor, axis: usize },
    BroadcastAdd { x: Tensor, b: Tensor, outer: usize, inner: usize },
    ScaleAxis { x: Tensor, axis: usize, scales: Vec<f64> },
    CrossEntropy { logits: Tensor, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Reduce { kind, .. } => match kind {
                ReduceKind::Mean => OpKind::Mean,
                ReduceKind::Max => OpKind::Max,
                ReduceKind::Sum => OpKind::Sum,
            },
            Op::SumAll { .. } => OpKind::SumAll,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Gather { .. } => OpKind::Gather,
            Op::Affine { .. } => OpKind::Affine,
            Op::MixAxis { .. } => OpKind::MixAxis,
            Op::BroadcastAdd { .. } => OpKind::BroadcastAdd,
            Op::ScaleAxis { .. } => OpKind::ScaleAxis,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x, .. }
            | Op::Softmax { x, .. }
            | Op::Reduce { x, .. }
            | Op::SumAll { x }
            | Op::Narrow { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Gather { x, .. }
            | Op::ScaleAxis { x, .. } => vec![x],
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::Affine { x, w, b } => vec![x, w, b],
            Op::MixAxis { m, x, .. } => vec![m, x],
            Op::BroadcastAdd { x, b, .. } => vec![x, b],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }

    /// Gradient contributions for each tracked input, given the gradient
    /// `g` of the output `out`.
    pub(crate) fn backward(&self, out: &Tensor, g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
        let mut res = Vec::new();
        let mut push = |t: &Tensor, f: &dyn Fn() -> Vec<f64>| {
            if t.requires_grad() {
                res.push((t.clone(), f()));
            }
        };
        match self {
            Op::MatMul { a, b } => {
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                push(a, &|| gemm(m, n, k, g, &transpose(k, n, b.data())));
                push(b, &|| gemm(k, m, n, &transpose(m, k, a.data()), g));
            }
            Op::Add { a, b } => {
                push(a, &|| reduce_broadcast(a, g, |gi, _| gi));
                push(b, &|| reduce_broadcast(b, g, |gi, _| gi));
            }
            Op::Mul { a, b } => {
                push(a, &|| reduce_broadcast(a, g, |gi, i| gi * value_at(b, i)));
                push(b, &|| reduce_broadcast(b, g, |gi, i| gi * value_at(a, i)));
            }
            Op::Scale { x, factor } => push(x, &|| g.iter().map(|v| v * factor).collect()),
            Op::Relu { x } => {
                push(x, &|| g.iter().zip(x.data()).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect())
            }
            Op::Sigmoid { x, out: y } => push(x, &|| g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect()),
            Op::Softmax { x, out: y } => push(x, &|| {
                let n = *x.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                dx
            }),
            Op::Reduce { x, axis, kind, argmax } => push(x, &|| {
                let (outer, len, inner) = split_at_axis(x.shape(), *axis);
                let mut dx = vec![0.0; x.numel()];
                for o in 0..outer {
                    for r in 0..inner {
                        let gi = g[o * inner + r];
                        match kind {
                            ReduceKind::Max => {
                                let i = argmax[o * inner + r];
                                dx[(o * len + i) * inner + r] = gi;
                            }
                            ReduceKind::Mean | ReduceKind::Sum => {
                                let v = if *kind == ReduceKind::Mean { gi / len as f64 } else { gi };
                                for i in 0..len {
                                    dx[(o * len + i) * inner + r] = v;
                                }
                            }
                        }
                    }
                }
                dx
            }),
            Op::SumAll { x } => push(x, &|| vec![g[0]; x.numel()]),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_at_axis(out.shape(), *axis);
                let mut at = 0;
                for p in parts {
                    let len = p.shape()[*axis];
                    push(p, &|| {
                        let mut dp = Vec::with_capacity(p.numel());
                        for o in 0..outer {
                            let s = (o * total + at) * inner;
                            dp.extend_from_slice(&g[s..s + len * inner]);
                        }
                        dp
                    });
                    at += len;
                }
            }
            Op::Narrow { x, axis, start } => push(x, &|| {
                let (outer, len, inner) = split_at_axis(x.shape(), *axis);
                let width = out.shape()[*axis];
                let mut dx = vec![0.0; x.numel()];
                for o in 0..outer {
                    let d = (o * len + start) * inner;
                    let s = o * width * inner;
                    dx[d..d + width * inner].copy_from_slice(&g[s..s + width * inner]);
                }
                dx
            }),
            Op::Reshape { x } => push(x, &|| g.to_vec()),
            Op::Permute { x, perm } => push(x, &|| {
                let offs = permute_offsets(x.shape(), perm);
                let mut dx = vec![0.0; x.numel()];
                for (gi, &o) in g.iter().zip(&offs) {
                    dx[o] = *gi;
                }
                dx
            }),
            Op::Gather { x, axis, index } => push(x, &|| {
                let (outer, len, inner) = split_at_axis(x.shape(), *axis);
                let mut dx = vec![0.0; x.numel()];
                for o in 0..outer {
                    for (i, &src) in index.iter().enumerate() {
                        let s = (o * index.len() + i) * inner;
                        let d = (o * len + src) * inner;
                        for r in 0..inner {
                            dx[d + r] += g[s + r];
                        }
                    }
                }
                dx
            }),
            Op::Affine { x, w, b } => {
                let (k, n) = (w.shape()[0], w.shape()[1]);
                let rows = x.numel() / k;
                push(x, &|| gemm(rows, n, k, g, &transpose(k, n, w.data())));
                push(w, &|| gemm(k, rows, n, &transpose(rows, k, x.data()), g));
                push(b, &|| {
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    db
                });
            }
            Op::MixAxis { m, x, axis } => {
                let (outer, n, inner) = split_at_axis(x.shape(), *axis);
                let n_out = m.shape()[0];
                if inner == 1 {
                    // out (outer×n_out) = X (outer×n) · mᵀ
                    push(x, &|| gemm(outer, n_out, n, g, m.data()));
                    push(m, &|| gemm(n_out, outer, n, &transpose(outer, n_out, g), x.data()));
                } else {
                    push(x, &|| {
                        let mt = transpose(n_out, n, m.data());
                        let mut dx = vec![0.0; x.numel()];
                        for o in 0..outer {
                            let go = &g[o * n_out * inner..(o + 1) * n_out * inner];
                            gemm_acc(n, n_out, inner, &mt, go, &mut dx[o * n * inner..(o + 1) * n * inner]);
                        }
                        dx
                    });
                    push(m, &|| {
                        // one long reduction: (n_out × outer·inner) · (outer·inner × n)
                        let xd = x.data();
                        if outer == 1 {
                            return gemm(n_out, inner, n, g, &transpose(n, inner, xd));
                        }
                        let mut gw = vec![0.0; n_out * outer * inner];
                        let mut xt = vec![0.0; outer * inner * n];
                        for o in 0..outer {
                            for i in 0..n_out {
                                let src = &g[(o * n_out + i) * inner..(o * n_out + i + 1) * inner];
                                gw[(i * outer + o) * inner..(i * outer + o + 1) * inner].copy_from_slice(src);
                            }
                            let blk = o * n * inner..(o + 1) * n * inner;
                            transpose_into(n, inner, &xd[blk.clone()], &mut xt[blk]);
                        }
                        gemm(n_out, outer * inner, n, &gw, &xt)
                    });
                }
            }
            Op::BroadcastAdd { x, b, outer, inner } => {
                push(x, &|| g.to_vec());
                push(b, &|| {
                    let (nb, inner) = (b.numel(), *inner);
                    let mut db = vec![0.0; nb];
                    for o in 0..*outer {
                        for (k, d) in db.iter_mut().enumerate() {
                            let base = (o * nb + k) * inner;
                            *d += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    db
                });
            }
            Op::ScaleAxis { x, axis, scales } => push(x, &|| {
                let (outer, len, inner) = split_at_axis(x.shape(), *axis);
                let mut dx = vec![0.0; x.numel()];
                for o in 0..outer {
                    for (i, s) in scales.iter().enumerate().take(len) {
                        let base = (o * len + i) * inner;
                        for r in 0..inner {
                            dx[base + r] = g[base + r] * s;
                        }
                    }
                }
                dx
            }),
            Op::CrossEntropy { logits, labels, probs } => push(logits, &|| {
                let bsz = labels.len();
                let k = logits.shape()[1];
                let scale = g[0] / bsz as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &y) in labels.iter().enumerate() {
                    d[row * k + y] -= scale;
                }
                d
            }),
        }
        res
    }
}

fn value_at(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

// Gradient for an operand of a scalar-broadcasting binary op: full-size
// operands take the elementwise value, scalar operands the sum.
fn reduce_broadcast(t: &Tensor, g: &[f64], f: impl Fn(f64, usize) -> f64) -> Vec<f64> {
    if t.numel() == g.len() {
        g.iter().enumerate().map(|(i, &gi)| f(gi, i)).collect()
    } else {
        vec![g.iter().enumerate().map(|(i, &gi)| f(gi, i)).sum()]
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// For each element of a row-major array of `shape`, the offset
/// `Σ idx[d] * strides[d]`.
fn strided_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    out
}

// Offsets into the input for each output element of a permutation.
fn permute_offsets(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = row_major_strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    strided_offsets(&out_shape, &strides)
}

fn binary_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || (b.numel() == 1 && b.rank() <= a.rank()) {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::dim(op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())))
    }
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::dim("matmul", format!("{a:?} × {b:?}")));
        }
        let data = gemm(a[0], a[1], b[1], self.data(), other.data());
        Ok(Tensor::from_op(vec![a[0], b[1]], data, Op::MatMul { a: self.clone(), b: other.clone() }))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shape("add", self, other)?;
        let n = shape.iter().product::<usize>();
        let data = (0..n).map(|i| value_at(self, i) + value_at(other, i)).collect();
        Ok(Tensor::from_op(shape, data, Op::Add { a: self.clone(), b: other.clone() }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let shape = binary_shape("mul", self, other)?;
        let n = shape.iter().product::<usize>();
        let data = (0..n).map(|i| value_at(self, i) * value_at(other, i)).collect();
        Ok(Tensor::from_op(shape, data, Op::Mul { a: self.clone(), b: other.clone() }))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Scale { x: self.clone(), factor })
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Relu { x: self.clone() })
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&v| sigmoid(v)).collect();
        Tensor::from_op(self.shape().to_vec(), out.clone(), Op::Sigmoid { x: self.clone(), out })
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(Error::dim("softmax", "rank-0 input"));
        }
        if self.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let n = *self.shape().last().unwrap();
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Ok(Tensor::from_op(self.shape().to_vec(), out.clone(), Op::Softmax { x: self.clone(), out }))
    }

    pub fn reduce(&self, axis: usize, kind: ReduceKind) -> Result<Tensor> {
        check_axis("reduce", self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| x[(o * len + i) * inner + r];
                let v = match kind {
                    ReduceKind::Sum => (0..len).map(at).sum(),
                    ReduceKind::Mean => (0..len).map(at).sum::<f64>() / len as f64,
                    ReduceKind::Max => {
                        let mut best = 0;
                        for i in 1..len {
                            if at(i) > at(best) {
                                best = i;
                            }
                        }
                        argmax[o * inner + r] = best;
                        at(best)
                    }
                };
                out[o * inner + r] = v;
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(shape, out, Op::Reduce { x: self.clone(), axis, kind, argmax }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(axis, ReduceKind::Mean)
    }

    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(axis, ReduceKind::Max)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(axis, ReduceKind::Sum)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(Vec::new(), vec![s], Op::SumAll { x: self.clone() })
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no parts"))?;
        check_axis("concat", first.shape(), axis)?;
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::dim(
                    "concat",
                    format!("{:?} does not match {:?} off axis {axis}", p.shape(), first.shape()),
                ));
            }
            shape[axis] += p.shape()[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let w = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        Ok(Tensor::from_op(shape, data, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis("narrow", self.shape(), axis)?;
        let (outer, full, inner) = split_at_axis(self.shape(), axis);
        if len == 0 || start + len > full {
            return Err(Error::dim("narrow", format!("range {start}..{} on axis of length {full}", start + len)));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&self.data()[s..s + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(shape, data, Op::Narrow { x: self.clone(), axis, start }))
    }

    /// Split into consecutive pieces of the given sizes along `axis`.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        check_axis("split", self.shape(), axis)?;
        if sizes.iter().sum::<usize>() != self.shape()[axis] {
            return Err(Error::dim(
                "split",
                format!("sizes {sizes:?} do not cover axis of length {}", self.shape()[axis]),
            ));
        }
        let mut at = 0;
        sizes
            .iter()
            .map(|&s| {
                let t = self.narrow(axis, at, s);
                at += s;
                t
            })
            .collect()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.contains(&0) || shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim("reshape", format!("{:?} to {shape:?}", self.shape())));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.data().to_vec(), Op::Reshape { x: self.clone() }))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let mut seen = vec![false; self.rank()];
        let valid =
            perm.len() == self.rank() && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::dim("permute", format!("{perm:?} is not a permutation of rank {}", self.rank())));
        }
        let offs = permute_offsets(self.shape(), perm);
        let data = offs.iter().map(|&o| self.data()[o]).collect();
        let shape = perm.iter().map(|&p| self.shape()[p]).collect();
        Ok(Tensor::from_op(shape, data, Op::Permute { x: self.clone(), perm: perm.to_vec() }))
    }

    /// Entry `i` along `axis` of the result is entry `index[i]` of the input.
    pub fn gather_axis(&self, axis: usize, index: &[usize]) -> Result<Tensor> {
        check_axis("gather", self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        if index.is_empty() || index.iter().any(|&i| i >= len) {
            return Err(Error::dim("gather", format!("index out of range for axis length {len}")));
        }
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                let s = (o * len + i) * inner;
                data.extend_from_slice(&self.data()[s..s + inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = index.len();
        Ok(Tensor::from_op(shape, data, Op::Gather { x: self.clone(), axis, index: index.to_vec() }))
    }

    /// `x W + b` over the last axis of `x`; `W` is `k×n`, `b` has `n` entries.
    pub fn affine(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let k = *self.shape().last().ok_or_else(|| Error::dim("affine", "rank-0 input"))?;
        if w.rank() != 2 || w.shape()[0] != k || b.numel() != w.shape()[1] {
            return Err(Error::dim("affine", format!("x {:?}, W {:?}, b {:?}", self.shape(), w.shape(), b.shape())));
        }
        let n = w.shape()[1];
        let rows = self.numel() / k;
        let mut data = gemm(rows, k, n, self.data(), w.data());
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(b.data()).for_each(|(v, bi)| *v += bi);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(Tensor::from_op(shape, data, Op::Affine { x: self.clone(), w: w.clone(), b: b.clone() }))
    }

    /// Left-multiply `axis` of `self` by `m` (`n_out × n`): every fibre
    /// along that axis is replaced by `m · fibre`.
    pub fn mix_axis(&self, m: &Tensor, axis: usize) -> Result<Tensor> {
        check_axis("mix_axis", self.shape(), axis)?;
        let (outer, n, inner) = split_at_axis(self.shape(), axis);
        if m.rank() != 2 || m.shape()[1] != n {
            return Err(Error::dim(
                "mix_axis",
                format!("matrix {:?} against axis {axis} of {:?}", m.shape(), self.shape()),
            ));
        }
        let n_out = m.shape()[0];
        let data = if inner == 1 {
            gemm(outer, n, n_out, self.data(), &transpose(n_out, n, m.data()))
        } else {
            let mut out = vec![0.0; outer * n_out * inner];
            for o in 0..outer {
                gemm_acc(
                    n_out,
                    n,
                    inner,
                    m.data(),
                    &self.data()[o * n * inner..(o + 1) * n * inner],
                    &mut out[o * n_out * inner..(o + 1) * n_out * inner],
                );
            }
            out
        };
        let mut shape = self.shape().to_vec();
        shape[axis] = n_out;
        Ok(Tensor::from_op(shape, data, Op::MixAxis { m: m.clone(), x: self.clone(), axis }))
    }

    /// Add `b`, whose shape is `self`'s shape restricted to `axes`
    /// (consecutive, increasing), broadcast over the remaining axes.
    pub fn add_broadcast(&self, b: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let ok = !axes.is_empty()
            && axes.windows(2).all(|w| w[1] == w[0] + 1)
            && axes.iter().all(|&a| a < self.rank())
            && b.rank() == axes.len()
            && axes.iter().zip(b.shape()).all(|(&a, &d)| self.shape()[a] == d);
        if !ok {
            return Err(Error::dim(
                "add_broadcast",
                format!("{:?} onto axes {axes:?} of {:?}", b.shape(), self.shape()),
            ));
        }
        let outer: usize = self.shape()[..axes[0]].iter().product();
        let inner: usize = self.shape()[axes[axes.len() - 1] + 1..].iter().product();
        let bd = b.data();
        let mut data = self.data().to_vec();
        for (chunk, bv) in data.chunks_mut(inner.max(1)).zip(bd.iter().cycle().take(outer * bd.len())) {
            for v in chunk {
                *v += bv;
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::BroadcastAdd { x: self.clone(), b: b.clone(), outer, inner },
        ))
    }

    /// Multiply entry `i` along `axis` by the constant `scales[i]`.
    pub fn scale_axis(&self, axis: usize, scales: &[f64]) -> Result<Tensor> {
        check_axis("scale_axis", self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        if scales.len() != len {
            return Err(Error::dim("scale_axis", format!("{} scales for axis of length {len}", scales.len())));
        }
        let mut data = self.data().to_vec();
        for o in 0..outer {
            for (i, s) in scales.iter().enumerate() {
                let base = (o * len + i) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v *= s);
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::ScaleAxis { x: self.clone(), axis, scales: scales.to_vec() },
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `self` (`B×K` logits).
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 || self.shape()[0] != labels.len() {
            return Err(Error::dim("cross_entropy", format!("logits {:?} with {} labels", self.shape(), labels.len())));
        }
        let k = self.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::dim("cross_entropy", format!("label {bad} with {k} classes")));
        }
        let mut probs = self.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(k).zip(labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        loss /= labels.len() as f64;
        Ok(Tensor::from_op(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy { logits: self.clone(), labels: labels.to_vec(), probs },
        ))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn p(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::param(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(a.matmul(&id).unwrap().data(), a.data());
        assert_eq!(id.matmul(&a).unwrap().data(), a.data());
        let err = a.matmul(&t(&[3, 1], &[1.0; 3])).unwrap_err().to_string();
        assert!(err.contains("[2, 2]") && err.contains("[3, 1]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let s = t(&[4], &[0.0; 4]).softmax_lastdim().unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let a = x.softmax_lastdim().unwrap();
        let b = x.add(&Tensor::scalar(100.0)).unwrap().softmax_lastdim().unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in a.data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
        assert!(t(&[2], &[0.0, f64::NAN]).softmax_lastdim().is_err());
    }

    #[test]
    fn elementwise_basics() {
        assert_eq!(t(&[3], &[-1.0, 0.0, 2.0]).relu().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(Tensor::scalar(0.0).sigmoid().data(), &[0.5]);
        let x = t(&[3], &[0.1, -7.3, 1e300]);
        assert_eq!(x.scale(1.0).data(), x.data());
        assert!(t(&[2], &[1.0, 2.0]).add(&t(&[3], &[1.0; 3])).is_err());
    }

    #[test]
    fn max_routes_to_first_argmax() {
        let x = p(&[3], &[1.0, 5.0, 3.0]);
        let m = x.max_axis(0).unwrap();
        assert_eq!(m.data(), &[5.0]);
        m.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);

        let tie = p(&[4], &[2.0, 7.0, 7.0, 1.0]);
        tie.max_axis(0).unwrap().sum_all().backward().unwrap();
        assert_eq!(tie.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_matches_loop() {
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let m = t(&[3, 4], &data).mean_axis(1).unwrap();
        for r in 0..3 {
            let want = data[r * 4..r * 4 + 4].iter().sum::<f64>() / 4.0;
            assert!((m.data()[r] - want).abs() < 1e-12);
        }
        assert_eq!(t(&[2, 5], &[3.5; 10]).mean_axis(0).unwrap().data(), &[3.5; 5]);
        assert!(matches!(t(&[2], &[1.0, 2.0]).mean_axis(1), Err(Error::Axis { .. })));
    }

    #[test]
    fn concat_places_parts() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[2, 2], &[7.0, 8.0, 9.0, 10.0]);
        let c = Tensor::concat(&[a.clone(), b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 7.0, 8.0, 4.0, 5.0, 6.0, 9.0, 10.0]);
        assert_eq!(Tensor::concat(&[a.clone()], 0).unwrap().data(), a.data());
        assert!(Tensor::concat(&[a, t(&[3, 2], &[0.0; 6])], 1).is_err());
    }

    #[test]
    fn affine_identity_zero_and_composition() {
        let x = t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.25, -4.0]);
        let id = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(x.affine(&id, &t(&[3], &[0.0; 3])).unwrap().data(), x.data());
        let b = t(&[2], &[1.5, -2.5]);
        let w = t(&[3, 2], &[0.3, -0.7, 1.1, 0.13, -0.9, 0.41]);
        let zero = t(&[2, 3], &[0.0; 6]);
        assert_eq!(zero.affine(&w, &b).unwrap().data(), &[1.5, -2.5, 1.5, -2.5]);
    }

    #[test]
    fn permute_and_gather() {
        let x = t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(x.permute(&[0, 0]).is_err());
        let g = x.gather_axis(1, &[2, 0]).unwrap();
        assert_eq!(g.data(), &[2.0, 0.0, 5.0, 3.0]);
    }

    #[test]
    fn mix_axis_matches_explicit_sum() {
        let x: Vec<f64> = (0..24).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = t(&[2, 3, 4], &x);
        let m = t(&[2, 3], &[1.0, -1.0, 0.5, 0.25, 2.0, -3.0]);
        for axis in [1usize] {
            let y = x.mix_axis(&m, axis).unwrap();
            assert_eq!(y.shape(), &[2, 2, 4]);
            for o in 0..2 {
                for i in 0..2 {
                    for r in 0..4 {
                        let want: f64 = (0..3).map(|k| m.data()[i * 3 + k] * x.data()[(o * 3 + k) * 4 + r]).sum();
                        assert!((y.data()[(o * 2 + i) * 4 + r] - want).abs() < 1e-12);
                    }
                }
            }
        }
        let last = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = last.mix_axis(&m, 1).unwrap();
        assert_eq!(y.data(), &[1.0 - 2.0 + 1.5, 0.25 + 4.0 - 9.0, 4.0 - 5.0 + 3.0, 1.0 + 10.0 - 18.0]);
    }

    #[test]
    fn broadcast_add_and_scale_axis() {
        let x = t(&[2, 3], &[0.0; 6]);
        let b = t(&[3], &[1.0, 2.0, 3.0]);
        assert_eq!(x.add_broadcast(&b, &[1]).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let c = t(&[2], &[10.0, 20.0]);
        assert_eq!(x.add_broadcast(&c, &[0]).unwrap().data(), &[10.0, 10.0, 10.0, 20.0, 20.0, 20.0]);
        assert!(x.add_broadcast(&c, &[1]).is_err());
        let s = t(&[2, 3], &[1.0; 6]).scale_axis(1, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn cross_entropy_value_and_gradient() {
        let z = p(&[1, 2], &[0.0, 0.0]);
        let l = z.cross_entropy(&[1]).unwrap();
        assert!((l.item().unwrap() - 2f64.ln()).abs() < 1e-15);
        l.backward().unwrap();
        assert_eq!(z.grad().unwrap(), vec![0.5, -0.5]);
        assert!(z.cross_entropy(&[2]).is_err());
    }

    #[test]
    fn sum_gives_ones_and_reuse_accumulates() {
        let x = p(&[3], &[1.0, -2.0, 0.5]);
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 3]);

        // f = sum(x*x + 3x): both uses of x contribute.
        let y = p(&[2], &[1.5, -0.5]);
        let f = y.mul(&y).unwrap().add(&y.scale(3.0)).unwrap().sum_all();
        f.backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![2.0 * 1.5 + 3.0, 2.0 * -0.5 + 3.0]);
    }
}
