//! Forward primitives and their adjoint rules.

use alloc::vec;
use alloc::vec::Vec;

use super::tape::{Tape, Var};
use super::{numel, Result, TensorError, LAYER_NORM_EPS};

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast2(Var),
    /// Right operand's shape is a suffix of the left's and is tiled over it.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    LeakyRelu(Var, f64),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    Trace(Var),
    Broadcast(Var),
    SplitHeads(Var, usize),
    MergeHeads(Var, usize),
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            MatMul(a, b) | BatchMatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            TransposeLast2(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Log(a) | Sigmoid(a)
            | Softplus(a) | LeakyRelu(a, _) | Clamp(a, _, _) | Softmax(a) | LogSoftmax(a)
            | LogSumExp(a) | Reshape(a) | SumAll(a) | SumAxis(a, _) | MeanAxis(a, _)
            | Trace(a) | Broadcast(a) | SplitHeads(a, _) | MergeHeads(a, _) => vec![*a],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Conv1d { x, w, b, .. } => vec![*x, *w, *b],
            MaxPool { x, .. } | Narrow { x, .. } | MaxAxis { x, .. } => vec![*x],
            Concat { inputs, .. } => inputs.clone(),
        }
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `c = a·b + beta·c` for row/column-strided operands; `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    libm::log1p(libm::exp(-libm::fabs(x))) + x.max(0.0)
}

fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = libm::exp(xi - m);
            s += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= s;
        }
    }
    out
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl Tape {
    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, op)
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), 0.0, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    /// `[b,m,k] × [b,k,n] → [b,m,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", sa, sb));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..bt {
            gemm(
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                (k, 1),
                &vb[i * k * n..(i + 1) * k * n],
                (n, 1),
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(vec![bt, m, n], out, Op::BatchMatMul(a, b)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for (src, dst) in v.chunks_exact(r * c).zip(out.chunks_exact_mut(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        Ok(self.push(shape, out, Op::TransposeLast2(x)))
    }

    /// Elementwise sum; `b` may have a suffix shape of `a` and is tiled.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add", sa, sb));
        }
        let shape = sa.to_vec();
        let vb = self.value(b);
        let nb = vb.len().max(1);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb[i % nb])
            .collect();
        Ok(self.push(shape, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("sub", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, libm::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, libm::log, Op::Log(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `log(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let side = self.choose(|t| t.value(x).iter().map(|&v| usize::from(v > 0.0)).collect());
        let v = self.value(x);
        assert_eq!(side.len(), v.len(), "replayed leaky_relu differs in size");
        let value = v
            .iter()
            .zip(&side)
            .map(|(&v, &s)| if s == 1 { v } else { slope * v })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::LeakyRelu(x, slope))
    }

    /// Clamps into `[lo, hi]`; the adjoint is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let region = self.choose(|t| {
            t.value(x)
                .iter()
                .map(|&v| if v < lo { 0 } else if v > hi { 2 } else { 1 })
                .collect()
        });
        let v = self.value(x);
        assert_eq!(region.len(), v.len(), "replayed clamp differs in size");
        let value = v
            .iter()
            .zip(&region)
            .map(|(&v, &r)| match r {
                0 => lo,
                2 => hi,
                _ => v,
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::Clamp(x, lo, hi))
    }

    /// Softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = last_dim(self.shape(x));
        let out = softmax_rows(self.value(x), d);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let d = last_dim(self.shape(x));
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for (row, o) in v.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let lse = logsumexp(row);
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = xi - lse;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::LogSoftmax(x))
    }

    /// `log Σ exp` over the last axis, removing it.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let d = last_dim(&s);
        let out = self.value(x).chunks_exact(d).map(logsumexp).collect();
        let shape = s[..s.len().saturating_sub(1)].to_vec();
        self.push(shape, out, Op::LogSumExp(x))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both `[D]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = last_dim(&s);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", &s, self.shape(gain)));
        }
        let rows = self.value(x).len() / d;
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let m = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            mean[r] = m;
            rstd[r] = rs;
            for j in 0..d {
                out[r * d + j] = (row[j] - m) * rs * g[j] + b[j];
            }
        }
        Ok(self.push(
            s,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
        ))
    }

    /// Strided valid convolution of `N` single-channel signals `[N,T]` with
    /// `D` filters `[D,K]` plus bias `[D]`, giving `[N, (T-K)/stride + 1, D]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || stride == 0 || sw[1] > sx[1] || sw[1] == 0 {
            return Err(shape_err("conv1d", &sx, &sw));
        }
        if self.shape(b) != [sw[0]] {
            return Err(shape_err("conv1d", &sw, self.shape(b)));
        }
        let (n, t) = (sx[0], sx[1]);
        let (d, k) = (sw[0], sw[1]);
        let len = (t - k) / stride + 1;
        let patches = im2col(self.value(x), n, t, k, stride, len);
        let mut out = vec![0.0; n * len * d];
        let bv = self.value(b);
        for row in out.chunks_exact_mut(d) {
            row.copy_from_slice(bv);
        }
        gemm(n * len, k, d, &patches, (k, 1), self.value(w), (1, k), 1.0, &mut out);
        Ok(self.push(vec![n, len, d], out, Op::Conv1d { x, w, b, stride }))
    }

    /// Non-overlapping max pooling along axis 1 of `[N,L,D]`; a trailing
    /// remainder shorter than `factor` is dropped.
    pub fn max_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(shape_err("max_pool", &s, &[factor]));
        }
        let (n, l, d) = (s[0], s[1], s[2]);
        let lo = l / factor;
        let argmax = self.choose(|t| {
            let v = t.value(x);
            let mut argmax = vec![0usize; n * lo * d];
            for i in 0..n {
                for p in 0..lo {
                    for j in 0..d {
                        let mut best = (i * l + p * factor) * d + j;
                        for f in 1..factor {
                            let idx = (i * l + p * factor + f) * d + j;
                            if v[idx] > v[best] {
                                best = idx;
                            }
                        }
                        argmax[(i * lo + p) * d + j] = best;
                    }
                }
            }
            argmax
        });
        assert_eq!(argmax.len(), n * lo * d, "replayed max_pool differs in size");
        let v = self.value(x);
        let out = argmax.iter().map(|&i| v[i]).collect();
        Ok(self.push(vec![n, lo, d], out, Op::MaxPool { x, argmax }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = self.value(v);
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("narrow", &s, &[axis, start, len]));
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Narrow { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let v = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), v, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(Vec::new(), vec![s], Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("sum_axis", &s, &[axis]));
        }
        let out = reduce_axis(self.value(x), &s, axis);
        let mut shape = s;
        shape.remove(axis);
        Ok(self.push(shape, out, Op::SumAxis(x, axis)))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(shape_err("mean_axis", &s, &[axis]));
        }
        let len = s[axis] as f64;
        let out = reduce_axis(self.value(x), &s, axis)
            .into_iter()
            .map(|v| v / len)
            .collect();
        let mut shape = s;
        shape.remove(axis);
        Ok(self.push(shape, out, Op::MeanAxis(x, axis)))
    }

    /// Maximum over `axis`, removing it.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(shape_err("max_axis", &s, &[axis]));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let argmax = self.choose(|t| {
            let v = t.value(x);
            let mut argmax = vec![0usize; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = o * len * inner + i;
                    for l in 1..len {
                        let idx = (o * len + l) * inner + i;
                        if v[idx] > v[best] {
                            best = idx;
                        }
                    }
                    argmax[o * inner + i] = best;
                }
            }
            argmax
        });
        assert_eq!(argmax.len(), outer * inner, "replayed max_axis differs in size");
        let v = self.value(x);
        let out = argmax.iter().map(|&i| v[i]).collect();
        let mut shape = s;
        shape.remove(axis);
        Ok(self.push(shape, out, Op::MaxAxis { x, argmax }))
    }

    pub fn trace(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != s[1] {
            return Err(shape_err("trace", s, &[]));
        }
        let n = s[0];
        let v = self.value(x);
        let t = (0..n).map(|i| v[i * n + i]).sum();
        Ok(self.push(Vec::new(), vec![t], Op::Trace(x)))
    }

    /// Repeats a single-element value to `shape`.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.value(x).len() != 1 {
            return Err(shape_err("broadcast", self.shape(x), shape));
        }
        let v = self.item(x);
        Ok(self.push(shape.to_vec(), vec![v; numel(shape)], Op::Broadcast(x)))
    }

    /// `[N, L, H·E] → [N·H, L, E]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(shape_err("split_heads", &s, &[heads]));
        }
        let (n, l, d) = (s[0], s[1], s[2]);
        let e = d / heads;
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for i in 0..n {
            for t in 0..l {
                for h in 0..heads {
                    let src = (i * l + t) * d + h * e;
                    let dst = ((i * heads + h) * l + t) * e;
                    out[dst..dst + e].copy_from_slice(&v[src..src + e]);
                }
            }
        }
        Ok(self.push(vec![n * heads, l, e], out, Op::SplitHeads(x, heads)))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(shape_err("merge_heads", &s, &[heads]));
        }
        let (nh, l, e) = (s[0], s[1], s[2]);
        let n = nh / heads;
        let d = e * heads;
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for i in 0..n {
            for t in 0..l {
                for h in 0..heads {
                    let dst = (i * l + t) * d + h * e;
                    let src = ((i * heads + h) * l + t) * e;
                    out[dst..dst + e].copy_from_slice(&v[src..src + e]);
                }
            }
        }
        Ok(self.push(vec![n, l, d], out, Op::MergeHeads(x, heads)))
    }

    pub(crate) fn backward_node(&mut self, i: usize, grad: &[f64]) {
        let deltas = self.input_deltas(i, grad);
        for (v, d) in deltas {
            self.accumulate(v, &d);
        }
    }

    fn input_deltas(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut out = Vec::new();
        let tracked = |v: Var| self.is_tracked(v);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), self.value(*b), (1, n), 0.0, &mut da);
                    out.push((*a, da));
                }
                if tracked(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a), (1, k), g, (n, 1), 0.0, &mut db);
                    out.push((*b, db));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (self.value(*a), self.value(*b));
                if tracked(*a) {
                    let mut da = vec![0.0; bt * m * k];
                    for t in 0..bt {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            (n, 1),
                            &vb[t * k * n..(t + 1) * k * n],
                            (1, n),
                            0.0,
                            &mut da[t * m * k..(t + 1) * m * k],
                        );
                    }
                    out.push((*a, da));
                }
                if tracked(*b) {
                    let mut db = vec![0.0; bt * k * n];
                    for t in 0..bt {
                        gemm(
                            k,
                            m,
                            n,
                            &va[t * m * k..(t + 1) * m * k],
                            (1, k),
                            &g[t * m * n..(t + 1) * m * n],
                            (n, 1),
                            0.0,
                            &mut db[t * k * n..(t + 1) * k * n],
                        );
                    }
                    out.push((*b, db));
                }
            }
            Op::TransposeLast2(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let mut dx = vec![0.0; g.len()];
                for (src, dst) in g.chunks_exact(r * c).zip(dx.chunks_exact_mut(r * c)) {
                    for a in 0..r {
                        for b in 0..c {
                            dst[a * c + b] = src[b * r + a];
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Add(a, b) => {
                if tracked(*a) {
                    out.push((*a, g.to_vec()));
                }
                if tracked(*b) {
                    let nb = self.value(*b).len().max(1);
                    let mut db = vec![0.0; nb];
                    for (j, gv) in g.iter().enumerate() {
                        db[j % nb] += gv;
                    }
                    out.push((*b, db));
                }
            }
            Op::Sub(a, b) => {
                if tracked(*a) {
                    out.push((*a, g.to_vec()));
                }
                if tracked(*b) {
                    out.push((*b, g.iter().map(|v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    let d = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    out.push((*a, d));
                }
                if tracked(*b) {
                    let d = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    out.push((*b, d));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|v| v * c).collect())),
            Op::AddScalar(x) | Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Exp(x) => out.push((*x, g.iter().zip(y).map(|(a, b)| a * b).collect())),
            Op::Log(x) => {
                let d = g.iter().zip(self.value(*x)).map(|(a, b)| a / b).collect();
                out.push((*x, d));
            }
            Op::Sigmoid(x) => {
                let d = g.iter().zip(y).map(|(a, s)| a * s * (1.0 - s)).collect();
                out.push((*x, d));
            }
            Op::Softplus(x) => {
                let d = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(a, &v)| a * sigmoid(v))
                    .collect();
                out.push((*x, d));
            }
            Op::LeakyRelu(x, slope) => {
                let d = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(a, &v)| if v > 0.0 { *a } else { a * slope })
                    .collect();
                out.push((*x, d));
            }
            Op::Clamp(x, lo, hi) => {
                let d = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(a, &v)| if v >= *lo && v <= *hi { *a } else { 0.0 })
                    .collect();
                out.push((*x, d));
            }
            Op::Softmax(x) => {
                let d = last_dim(&node.shape);
                let mut dx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g
                    .chunks_exact(d)
                    .zip(y.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, dx));
            }
            Op::LogSoftmax(x) => {
                let d = last_dim(&node.shape);
                let mut dx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g
                    .chunks_exact(d)
                    .zip(y.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                {
                    let s: f64 = gr.iter().sum();
                    for j in 0..d {
                        dr[j] = gr[j] - libm::exp(yr[j]) * s;
                    }
                }
                out.push((*x, dx));
            }
            Op::LogSumExp(x) => {
                let d = last_dim(self.shape(*x));
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.len()];
                for (r, (xr, dr)) in xv.chunks_exact(d).zip(dx.chunks_exact_mut(d)).enumerate() {
                    for j in 0..d {
                        dr[j] = g[r] * libm::exp(xr[j] - y[r]);
                    }
                }
                out.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let d = last_dim(&node.shape);
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..mean.len() {
                    let row = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        xhat[j] = (row[j] - mean[r]) * rstd[r];
                        dxhat[j] = gr[j] * gv[j];
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if tracked(*x) {
                    out.push((*x, dx));
                }
                out.push((*gain, dg));
                out.push((*bias, db));
            }
            Op::Conv1d { x, w, b, stride } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (n, t) = (sx[0], sx[1]);
                let (d, k) = (sw[0], sw[1]);
                let len = node.shape[1];
                let rows = n * len;
                if tracked(*w) {
                    let patches = im2col(self.value(*x), n, t, k, *stride, len);
                    let mut dw = vec![0.0; d * k];
                    gemm(d, rows, k, g, (1, d), &patches, (k, 1), 0.0, &mut dw);
                    out.push((*w, dw));
                }
                if tracked(*b) {
                    let mut db = vec![0.0; d];
                    for row in g.chunks_exact(d) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    out.push((*b, db));
                }
                if tracked(*x) {
                    let mut dp = vec![0.0; rows * k];
                    gemm(rows, d, k, g, (d, 1), self.value(*w), (k, 1), 0.0, &mut dp);
                    let mut dx = vec![0.0; n * t];
                    for i in 0..n {
                        for p in 0..len {
                            let src = &dp[(i * len + p) * k..(i * len + p + 1) * k];
                            let base = i * t + p * stride;
                            for (j, v) in src.iter().enumerate() {
                                dx[base + j] += v;
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::MaxPool { x, argmax } | Op::MaxAxis { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                out.push((*x, dx));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if tracked(v) {
                        let mut dv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        out.push((v, dv));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = split_axis(self.shape(*x), *axis);
                let len = node.shape[*axis];
                let mut dx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, dx));
            }
            Op::SumAll(x) => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let c = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for j in 0..inner {
                            dx[(o * len + l) * inner + j] = g[o * inner + j] * c;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Trace(x) => {
                let n = self.shape(*x)[0];
                let mut dx = vec![0.0; n * n];
                for j in 0..n {
                    dx[j * n + j] = g[0];
                }
                out.push((*x, dx));
            }
            Op::Broadcast(x) => out.push((*x, vec![g.iter().sum()])),
            Op::SplitHeads(x, heads) => {
                let s = self.shape(*x);
                let (n, l, d) = (s[0], s[1], s[2]);
                let e = d / heads;
                let mut dx = vec![0.0; g.len()];
                for a in 0..n {
                    for t in 0..l {
                        for h in 0..*heads {
                            let dst = (a * l + t) * d + h * e;
                            let src = ((a * heads + h) * l + t) * e;
                            dx[dst..dst + e].copy_from_slice(&g[src..src + e]);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::MergeHeads(x, heads) => {
                let s = self.shape(*x);
                let (nh, l, e) = (s[0], s[1], s[2]);
                let n = nh / heads;
                let d = e * heads;
                let mut dx = vec![0.0; g.len()];
                for a in 0..n {
                    for t in 0..l {
                        for h in 0..*heads {
                            let src = (a * l + t) * d + h * e;
                            let dst = ((a * heads + h) * l + t) * e;
                            dx[dst..dst + e].copy_from_slice(&g[src..src + e]);
                        }
                    }
                }
                out.push((*x, dx));
            }
        }
        out
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(row.iter().map(|v| libm::exp(v - m)).sum::<f64>())
}

fn reduce_axis(v: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let src = &v[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (a, b) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *a += b;
            }
        }
    }
    out
}

fn im2col(x: &[f64], n: usize, t: usize, k: usize, stride: usize, len: usize) -> Vec<f64> {
    let mut patches = Vec::with_capacity(n * len * k);
    for i in 0..n {
        let row = &x[i * t..(i + 1) * t];
        for p in 0..len {
            patches.extend_from_slice(&row[p * stride..p * stride + k]);
        }
    }
    patches
}
