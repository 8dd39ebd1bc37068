use rand::Rng;
use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask of shape `[batch, tq, tk]`; `true` marks an
/// allowed (query, key) pair. A batch extent of 1 is shared by every sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(batch: usize, tq: usize, tk: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != batch * tq * tk {
            return Err(Error::Shape {
                op: "attn_mask",
                lhs: vec![batch, tq, tk],
                rhs: vec![allowed.len()],
            });
        }
        Ok(Self {
            batch,
            tq,
            tk,
            allowed,
        })
    }

    /// Key-presence mask: query `q` of sequence `b` may attend key `k` iff
    /// `present[b * tk + k]`.
    pub fn from_key_presence(batch: usize, tq: usize, tk: usize, present: &[bool]) -> Result<Self> {
        if present.len() != batch * tk {
            return Err(Error::Shape {
                op: "attn_mask",
                lhs: vec![batch, tk],
                rhs: vec![present.len()],
            });
        }
        let mut allowed = Vec::with_capacity(batch * tq * tk);
        for b in 0..batch {
            for _ in 0..tq {
                allowed.extend_from_slice(&present[b * tk..(b + 1) * tk]);
            }
        }
        Self::new(batch, tq, tk, allowed)
    }

    /// Lower-triangular mask shared by every sequence.
    pub fn causal(t: usize) -> Self {
        let allowed = (0..t * t).map(|i| i % t <= i / t).collect();
        Self {
            batch: 1,
            tq: t,
            tk: t,
            allowed,
        }
    }

    /// Elementwise AND of two masks with compatible batch extents.
    pub fn and(&self, other: &Self) -> Result<Self> {
        if self.tq != other.tq || self.tk != other.tk {
            return Err(Error::Shape {
                op: "attn_mask_and",
                lhs: vec![self.batch, self.tq, self.tk],
                rhs: vec![other.batch, other.tq, other.tk],
            });
        }
        let batch = self.batch.max(other.batch);
        let per = self.tq * self.tk;
        let mut allowed = Vec::with_capacity(batch * per);
        for b in 0..batch {
            let sa = (b % self.batch) * per;
            let sb = (b % other.batch) * per;
            for i in 0..per {
                allowed.push(self.allowed[sa + i] && other.allowed[sb + i]);
            }
        }
        Self::new(batch, self.tq, self.tk, allowed)
    }

    pub fn is_allowed(&self, b: usize, q: usize, k: usize) -> bool {
        self.allowed[((b % self.batch) * self.tq + q) * self.tk + k]
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    AddScalar {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedSoftmax {
        x: Var,
        tk: usize,
    },
    LogSoftmax {
        x: Var,
        len: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        d: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum {
        x: Var,
    },
    Dropout {
        x: Var,
        keep_scale: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Narrow {
        x: Var,
        outer: usize,
        in_width: usize,
        offset: usize,
        width: usize,
    },
    Expand {
        x: Var,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
        width: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Persistent gradient, only kept for leaves that require it.
    grad: Option<Vec<T>>,
}

/// Append-only record of executed operations.
///
/// Nodes are stored in execution order, which is a topological order of the
/// computation. [`Graph::backward`] walks them once in reverse.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Rows-times-flops threshold above which matmul splits rows across threads.
const PAR_MATMUL_FLOPS: usize = 1 << 16;

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Strip leading unit extents of `b` and check it is a suffix of `a`.
/// Returns how many times `b` repeats inside `a`.
fn leading_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    let first = b.iter().position(|&d| d != 1).unwrap_or(b.len());
    let core = &b[first..];
    if core.len() > a.len() || a[a.len() - core.len()..] != *core {
        return Err(shape_err(op, a, b));
    }
    let an: usize = a.iter().product();
    let bn: usize = core.iter().product();
    Ok(an / bn)
}

fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    // i-k-j order; each output row accumulates over k in ascending order, so
    // trailing zero terms never perturb a row's result.
    let row = |(i, orow): (usize, &mut [T])| {
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_MATMUL_FLOPS && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Register a trainable tensor.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Register a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`. `b` is either `[k, n]` (or with unit leading
    /// extents), shared across every leading batch of `a`, or `[.., k, n]`
    /// with the same leading extents as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let batch: usize = lead_a.iter().product();
        let b_shared = lead_b.iter().all(|&d| d == 1);
        if !b_shared && lead_a != lead_b {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let bo = if b_shared { 0 } else { bi * k * n };
            matmul_kernel(
                &av[bi * m * k..(bi + 1) * m * k],
                &bv[bo..bo + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
            },
            rg,
        ))
    }

    /// Reorder axes; `axes[i]` is the input axis that becomes output axis `i`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", &shape, axes));
        }
        let out = permute_data(self.value(x).data(), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(shape_err("transpose", self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        let reps = leading_broadcast(name, self.shape(a), self.shape(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let m = bv.len();
        let out: Vec<T> = (0..reps * m).map(|i| f(av[i], bv[i % m])).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        let op = match name {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(value, Op::AddScalar { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Range {
                what: "softmax axis",
                index: axis,
                limit: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xv[at(j)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Softmax over the last axis of `x: [B, .., tq, tk]` where disallowed
    /// entries of `mask` receive exactly zero weight (a −∞ additive bias).
    /// The mask broadcasts over every axis between the batch and `tq`.
    pub fn masked_softmax(&mut self, x: Var, mask: &AttnMask) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 3 || shape[r - 2] != mask.tq || shape[r - 1] != mask.tk || (mask.batch != 1 && mask.batch != shape[0]) {
            return Err(shape_err("masked_softmax", &shape, &[mask.batch, mask.tq, mask.tk]));
        }
        let (tq, tk) = (mask.tq, mask.tk);
        let per_batch: usize = shape[1..].iter().product::<usize>() / (tq * tk);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for (row, (xr, or)) in xv.chunks(tk).zip(out.chunks_mut(tk)).enumerate() {
            let b = row / (per_batch * tq);
            let q = row % tq;
            let mrow = &mask.allowed[((b % mask.batch) * tq + q) * tk..][..tk];
            let mut max = T::neg_infinity();
            for (&v, &ok) in xr.iter().zip(mrow) {
                if ok && v > max {
                    max = v;
                }
            }
            if !mrow.iter().any(|&ok| ok) {
                return Err(Error::contract(format!(
                    "attention query {q} of sequence {b} has no unmasked key"
                )));
            }
            let mut sum = T::zero();
            for ((o, &v), &ok) in or.iter_mut().zip(xr).zip(mrow) {
                if ok {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            for o in or.iter_mut() {
                *o = *o / sum;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaskedSoftmax { x, tk }, rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| shape_err("log_softmax", &shape, &[]))?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for (xr, or) in xv.chunks(len).zip(out.chunks_mut(len)) {
            let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = xr.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for (o, &v) in or.iter_mut().zip(xr) {
                *o = v - lse;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax { x, len }, rg))
    }

    /// Normalize each row over the last axis to zero mean and unit
    /// (population) variance, then apply `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm", &shape, &[]))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", &shape, self.shape(gain)));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.len() / d;
        let dn = T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                d,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// Inverted dropout. Identity (no node recorded) at eval or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R, train: bool) -> Var {
        if !train || p <= 0.0 {
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let keep_scale: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .zip(&keep_scale)
            .map(|(&v, &k)| v * k)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Dropout { x, keep_scale }, rg)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Range {
                what: "concat axis",
                index: axis,
                limit: base.len(),
            });
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(inputs.len());
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(shape_err("concat", &base, s));
            }
            widths.push(s[axis] * inner);
            total += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
            rg,
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Range {
                what: "narrow",
                index: start + len,
                limit: shape.get(axis).copied().unwrap_or(0),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let in_width = shape[axis] * inner;
        let (offset, width) = (start * inner, len * inner);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            out.extend_from_slice(&xv[o * in_width + offset..o * in_width + offset + width]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(oshape, out)?,
            Op::Narrow {
                x,
                outer,
                in_width,
                offset,
                width,
            },
            rg,
        ))
    }

    /// Repeat `x` along new or unit leading axes to reach `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let reps = leading_broadcast("expand", shape, self.shape(x))?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(reps * xv.len());
        for _ in 0..reps {
            out.extend_from_slice(xv);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::Expand { x }, rg))
    }

    /// Select rows of a `[v, d]` table; output is `[indices.len(), d]`.
    /// Equivalent to multiplying one-hot rows by the table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(shape_err("gather_rows", &shape, &[indices.len()]));
        }
        let (v, d) = (shape[0], shape[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(Error::Range {
                    what: "gather_rows",
                    index: i,
                    limit: v,
                });
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![indices.len(), d], out)?,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
                width: d,
            },
            rg,
        ))
    }

    /// Accumulate d`loss`/d`leaf` into every leaf that requires a gradient.
    /// Gradients add onto whatever earlier calls left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
            } => {
                let (av, bv) = (val(a), val(b));
                if self.rg(a) {
                    // da = g · bᵀ
                    let mut da = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        let bo = if b_shared { 0 } else { bi * k * n };
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..][..n];
                            for kk in 0..k {
                                let brow = &bv[bo + kk * n..][..n];
                                da[(bi * m + i) * k + kk] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                            }
                        }
                    }
                    send(a, da);
                }
                if self.rg(b) {
                    // db = aᵀ · g, summed over batches when b is shared
                    let mut db = vec![T::zero(); if b_shared { k * n } else { batch * k * n }];
                    for bi in 0..batch {
                        let bo = if b_shared { 0 } else { bi * k * n };
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..][..n];
                            for kk in 0..k {
                                let aik = av[(bi * m + i) * k + kk];
                                for (d, &gv) in db[bo + kk * n..][..n].iter_mut().zip(grow) {
                                    *d += aik * gv;
                                }
                            }
                        }
                    }
                    send(b, db);
                }
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                send(*x, permute_data(g, node.value.shape(), &inv));
            }
            &Op::Reshape { x } => send(x, g.to_vec()),
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let neg = matches!(node.op, Op::Sub { .. });
                send(a, g.to_vec());
                if self.rg(b) {
                    let m = val(b).len();
                    let mut db = vec![T::zero(); m];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % m] += gv;
                    }
                    if neg {
                        db.iter_mut().for_each(|v| *v = -*v);
                    }
                    send(b, db);
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (val(a), val(b));
                let m = bv.len();
                if self.rg(a) {
                    send(a, g.iter().enumerate().map(|(i, &gv)| gv * bv[i % m]).collect());
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); m];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % m] += gv * av[i];
                    }
                    send(b, db);
                }
            }
            &Op::Scale { x, c } => send(x, g.iter().map(|&v| v * c).collect()),
            &Op::AddScalar { x } => send(x, g.to_vec()),
            &Op::Relu { x } => {
                let xv = val(x);
                send(
                    x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                        .collect(),
                )
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                send(x, dx);
            }
            &Op::MaskedSoftmax { x, tk } => {
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(tk).zip(g.chunks(tk)).zip(dx.chunks_mut(tk)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                send(x, dx);
            }
            &Op::LogSoftmax { x, len } => {
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(len).zip(g.chunks(len)).zip(dx.chunks_mut(len)) {
                    let gs: T = gr.iter().copied().sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = gv - yv.exp() * gs;
                    }
                }
                send(x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                d,
                xhat,
                inv_std,
            } => {
                let d = *d;
                let gv = val(*gain);
                let dn = T::from_f64(d as f64);
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..][..d];
                        let hr = &xhat[r * d..][..d];
                        let dh: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let s1: T = dh.iter().copied().sum();
                        let s2: T = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = is / dn * (dn * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                    send(*x, dx);
                }
                if self.rg(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for (i, (&gvv, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[i % d] += gvv * h;
                    }
                    send(*gain, dg);
                }
                if self.rg(*bias) {
                    let mut db = vec![T::zero(); d];
                    for (i, &gvv) in g.iter().enumerate() {
                        db[i % d] += gvv;
                    }
                    send(*bias, db);
                }
            }
            &Op::Sum { x } => send(x, vec![g[0]; val(x).len()]),
            Op::Dropout { x, keep_scale } => {
                send(*x, g.iter().zip(keep_scale).map(|(&a, &b)| a * b).collect())
            }
            Op::Concat {
                inputs,
                outer,
                widths,
            } => {
                let row: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    let mut part = Vec::with_capacity(outer * w);
                    for o in 0..*outer {
                        part.extend_from_slice(&g[o * row + offset..o * row + offset + w]);
                    }
                    send(v, part);
                    offset += w;
                }
            }
            &Op::Narrow {
                x,
                outer,
                in_width,
                offset,
                width,
            } => {
                let mut dx = vec![T::zero(); outer * in_width];
                for o in 0..outer {
                    dx[o * in_width + offset..o * in_width + offset + width]
                        .copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                send(x, dx);
            }
            &Op::Expand { x } => {
                let m = val(x).len();
                let mut dx = vec![T::zero(); m];
                for (i, &gv) in g.iter().enumerate() {
                    dx[i % m] += gv;
                }
                send(x, dx);
            }
            Op::GatherRows {
                table,
                indices,
                width,
            } => {
                let mut dt = vec![T::zero(); val(*table).len()];
                for (r, &i) in indices.iter().enumerate() {
                    for (d, &gv) in dt[i * width..(i + 1) * width].iter_mut().zip(&g[r * width..]) {
                        *d += gv;
                    }
                }
                send(*table, dt);
            }
        }
    }
}

fn permute_data<T: Copy>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let r = shape.len();
    let mut in_strides = vec![1; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0; r];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}
