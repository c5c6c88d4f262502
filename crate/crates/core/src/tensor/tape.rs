use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, Tap};
use super::{Scalar, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    tape: u64,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul {
        a: usize,
        b: usize,
        shared_rhs: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Gather {
        a: usize,
        map: Vec<usize>,
    },
    Reshape(usize),
    Concat {
        parts: Vec<(usize, usize)>,
        outer: usize,
    },
    Slice {
        a: usize,
        outer: usize,
        in_width: usize,
        start: usize,
    },
    Sum(usize),
    Mean(usize),
    LayerNorm {
        a: usize,
        width: usize,
        rstd: Vec<T>,
    },
    Softmax {
        a: usize,
        width: usize,
    },
    Gelu(usize),
    Silu(usize),
    Sigmoid(usize),
    Clamp {
        a: usize,
        lo: f64,
        hi: f64,
    },
    Mse(usize, usize),
    Trilinear {
        a: usize,
        batch: usize,
        input: [usize; 3],
        taps: [Vec<Tap>; 3],
    },
    Nearest {
        a: usize,
        batch: usize,
        input: [usize; 3],
        taps: [Vec<usize>; 3],
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so the inputs of every node precede
/// it and a single reverse sweep is a valid backward schedule.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`. Always `Some` for leaves
    /// recorded with `requires_grad`.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let u = T::from_f64(GELU_C) * (x + T::from_f64(GELU_K) * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let u = T::from_f64(GELU_C) * (x + T::from_f64(GELU_K) * x * x * x);
    let th = u.tanh();
    let du = T::from_f64(GELU_C) * (T::ONE + T::from_f64(3.0 * GELU_K) * x * x);
    half * (T::ONE + th) + half * x * (T::ONE - th * th) * du
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    let bl: usize = b.iter().product();
    a == b || bl == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b)
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_unchecked(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn check(&self, v: Var) -> Result<&Node<T>, TensorError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(&self.nodes[v.idx])
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { idx, tape: self.id }
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var, TensorError> {
        let (na, nb) = (self.check(a)?, self.check(b)?);
        if !broadcastable(na.value.shape(), nb.value.shape()) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: na.value.shape().to_vec(),
                rhs: nb.value.shape().to_vec(),
            });
        }
        let bd = nb.value.data();
        let bl = bd.len();
        let data: Vec<T> = na
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % bl]))
            .collect();
        let value = Tensor::new(na.value.shape().to_vec(), data)?;
        let rg = na.requires_grad || nb.requires_grad;
        self.push(name, value, op(a.idx, b.idx), rg)
    }

    /// Elementwise sum. `b` may be a trailing suffix of `a`'s shape or a
    /// single element; it is then repeated over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let na = self.check(a)?;
        let cs = T::from_f64(c);
        let data = na.value.data().iter().map(|&x| x * cs).collect();
        let value = Tensor::new(na.value.shape().to_vec(), data)?;
        let rg = na.requires_grad;
        self.push("scale", value, Op::Scale(a.idx, c), rg)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let na = self.check(a)?;
        let cs = T::from_f64(c);
        let data = na.value.data().iter().map(|&x| x + cs).collect();
        let value = Tensor::new(na.value.shape().to_vec(), data)?;
        let rg = na.requires_grad;
        self.push("shift", value, Op::Shift(a.idx), rg)
    }

    /// Matrix product over the last two axes. `a` is `[..., m, k]`; `b` is
    /// either a shared `[k, n]` matrix or `[..., k, n]` with the same leading
    /// axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (na, nb) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (na.value.shape(), nb.value.shape());
        let err = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return Err(err());
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::ZERO; batch * m * n];
        let (ad, bd) = (na.value.data(), nb.value.data());
        if shared_rhs {
            kernels::matmul_into(ad, bd, &mut out, batch * m, k, n, false);
        } else {
            for i in 0..batch {
                kernels::matmul_into(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                );
            }
        }
        let rg = na.requires_grad || nb.requires_grad;
        let value = Tensor::new(out_shape, out)?;
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a: a.idx,
                b: b.idx,
                shared_rhs,
                batch,
                m,
                k,
                n,
            },
            rg,
        )
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let na = self.check(a)?;
        let shape = na.value.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len()) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("permutation {perm:?} for shape {shape:?}"),
            });
        }
        for &p in perm {
            if std::mem::replace(&mut seen[p], true) {
                return Err(TensorError::InvalidArgument {
                    op: "permute",
                    msg: format!("repeated axis in {perm:?}"),
                });
            }
        }
        let map = kernels::permute_index(shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src = na.value.data();
        let data = map.iter().map(|&i| src[i]).collect();
        let rg = na.requires_grad;
        let value = Tensor::new(out_shape, data)?;
        self.push("permute", value, Op::Gather { a: a.idx, map }, rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let rank = self.check(a)?.value.shape().len();
        if rank < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: "rank < 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let na = self.check(a)?;
        if shape.iter().product::<usize>() != na.value.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: na.value.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = na.value.clone().reshaped(shape.to_vec())?;
        let rg = na.requires_grad;
        self.push("reshape", value, Op::Reshape(a.idx), rg)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.check(*parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?)?;
        let base = first.value.shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} for rank {}", base.len()),
            });
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        let mut rg = false;
        for &p in parts {
            let n = self.check(p)?;
            let s = n.value.shape();
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[axis] * inner);
            rg |= n.requires_grad;
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.idx].value.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total / inner;
        let value = Tensor::new(shape, data)?;
        let parts = parts.iter().map(|p| p.idx).zip(widths).collect();
        self.push("concat", value, Op::Concat { parts, outer }, rg)
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let na = self.check(a)?;
        let shape = na.value.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let in_width = shape[axis] * inner;
        let (s0, w) = (start * inner, len * inner);
        let src = na.value.data();
        let mut data = Vec::with_capacity(outer * w);
        for o in 0..outer {
            data.extend_from_slice(&src[o * in_width + s0..o * in_width + s0 + w]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = na.requires_grad;
        let value = Tensor::new(out_shape, data)?;
        self.push(
            "slice",
            value,
            Op::Slice {
                a: a.idx,
                outer,
                in_width,
                start: s0,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let na = self.check(a)?;
        let s: T = na.value.data().iter().copied().sum();
        let rg = na.requires_grad;
        self.push("sum", Tensor::scalar(s), Op::Sum(a.idx), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let na = self.check(a)?;
        let n = T::from_f64(na.value.len() as f64);
        let s: T = na.value.data().iter().copied().sum();
        let rg = na.requires_grad;
        self.push("mean", Tensor::scalar(s / n), Op::Mean(a.idx), rg)
    }

    /// Normalises each row of the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let na = self.check(a)?;
        let width = *na.value.shape().last().unwrap_or(&1);
        let src = na.value.data();
        let rows = src.len() / width;
        let wn = T::from_f64(width as f64);
        let mut out = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in src.chunks_exact(width) {
            let mu = row.iter().copied().sum::<T>() / wn;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / wn;
            let r = T::ONE / (var + T::from_f64(eps)).sqrt();
            rstd.push(r);
            out.extend(row.iter().map(|&x| (x - mu) * r));
        }
        let rg = na.requires_grad;
        let value = Tensor::new(na.value.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                a: a.idx,
                width,
                rstd,
            },
            rg,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let na = self.check(a)?;
        let width = *na.value.shape().last().unwrap_or(&1);
        let mut out = Vec::with_capacity(na.value.len());
        for row in na.value.data().chunks_exact(width) {
            let mx = row
                .iter()
                .copied()
                .fold(row[0], |m, x| if x > m { x } else { m });
            let start = out.len();
            out.extend(row.iter().map(|&x| (x - mx).exp()));
            let z: T = out[start..].iter().copied().sum();
            let inv = T::ONE / z;
            for v in &mut out[start..] {
                *v *= inv;
            }
        }
        let rg = na.requires_grad;
        let value = Tensor::new(na.value.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax { a: a.idx, width }, rg)
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(T) -> T,
        op: fn(usize) -> Op<T>,
    ) -> Result<Var, TensorError> {
        let na = self.check(a)?;
        let data = na.value.data().iter().map(|&x| f(x)).collect();
        let rg = na.requires_grad;
        let value = Tensor::new(na.value.shape().to_vec(), data)?;
        self.push(name, value, op(a.idx), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("gelu", a, gelu, Op::Gelu)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("silu", a, |x| x * sigmoid(x), Op::Silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid)
    }

    /// Elementwise clamp to `[lo, hi]`. Gradient passes only where the input
    /// lies inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        if !(lo <= hi) {
            return Err(TensorError::InvalidArgument {
                op: "clamp",
                msg: format!("empty interval [{lo}, {hi}]"),
            });
        }
        let na = self.check(a)?;
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        let data = na
            .value
            .data()
            .iter()
            .map(|&x| if x < l { l } else if x > h { h } else { x })
            .collect();
        let rg = na.requires_grad;
        let value = Tensor::new(na.value.shape().to_vec(), data)?;
        self.push("clamp", value, Op::Clamp { a: a.idx, lo, hi }, rg)
    }

    /// Mean squared error over all elements; shapes must match exactly.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (na, nb) = (self.check(a)?, self.check(b)?);
        if na.value.shape() != nb.value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: na.value.shape().to_vec(),
                rhs: nb.value.shape().to_vec(),
            });
        }
        let n = T::from_f64(na.value.len() as f64);
        let s: T = na
            .value
            .data()
            .iter()
            .zip(nb.value.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = na.requires_grad || nb.requires_grad;
        self.push("mse", Tensor::scalar(s / n), Op::Mse(a.idx, b.idx), rg)
    }

    fn volume_dims(
        &self,
        name: &'static str,
        a: Var,
        size: [usize; 3],
    ) -> Result<(usize, [usize; 3], Vec<usize>), TensorError> {
        let s = self.check(a)?.value.shape().to_vec();
        if s.len() < 3 || size.contains(&0) {
            return Err(TensorError::InvalidArgument {
                op: name,
                msg: format!("cannot resample {s:?} to {size:?}"),
            });
        }
        let r = s.len();
        let input = [s[r - 3], s[r - 2], s[r - 1]];
        let batch = s[..r - 3].iter().product();
        let mut out_shape = s[..r - 3].to_vec();
        out_shape.extend(size);
        Ok((batch, input, out_shape))
    }

    /// Trilinear resampling of the last three axes to `size`
    /// (half-pixel centres, edge clamped).
    pub fn trilinear(&mut self, a: Var, size: [usize; 3]) -> Result<Var, TensorError> {
        let (batch, input, out_shape) = self.volume_dims("trilinear", a, size)?;
        let taps = [
            kernels::linear_taps(input[0], size[0]),
            kernels::linear_taps(input[1], size[1]),
            kernels::linear_taps(input[2], size[2]),
        ];
        let src = self.nodes[a.idx].value.data();
        let in_vol = input[0] * input[1] * input[2];
        let mut out = Vec::with_capacity(batch * size.iter().product::<usize>());
        for b in 0..batch {
            let vol = &src[b * in_vol..(b + 1) * in_vol];
            for tf in &taps[0] {
                for th in &taps[1] {
                    for tw in &taps[2] {
                        let mut acc = 0.0f64;
                        for (f, wf) in [(tf.lo, 1.0 - tf.w_hi), (tf.hi, tf.w_hi)] {
                            for (h, wh) in [(th.lo, 1.0 - th.w_hi), (th.hi, th.w_hi)] {
                                for (w, ww) in [(tw.lo, 1.0 - tw.w_hi), (tw.hi, tw.w_hi)] {
                                    let idx = (f * input[1] + h) * input[2] + w;
                                    acc += wf * wh * ww * vol[idx].to_f64();
                                }
                            }
                        }
                        out.push(T::from_f64(acc));
                    }
                }
            }
        }
        let rg = self.rg(a.idx);
        let value = Tensor::new(out_shape, out)?;
        self.push(
            "trilinear",
            value,
            Op::Trilinear {
                a: a.idx,
                batch,
                input,
                taps,
            },
            rg,
        )
    }

    /// Nearest-neighbour resampling of the last three axes to `size`.
    pub fn nearest(&mut self, a: Var, size: [usize; 3]) -> Result<Var, TensorError> {
        let (batch, input, out_shape) = self.volume_dims("nearest", a, size)?;
        let taps = [
            kernels::nearest_taps(input[0], size[0]),
            kernels::nearest_taps(input[1], size[1]),
            kernels::nearest_taps(input[2], size[2]),
        ];
        let src = self.nodes[a.idx].value.data();
        let in_vol = input[0] * input[1] * input[2];
        let mut out = Vec::with_capacity(batch * size.iter().product::<usize>());
        for b in 0..batch {
            for &f in &taps[0] {
                for &h in &taps[1] {
                    for &w in &taps[2] {
                        out.push(src[b * in_vol + (f * input[1] + h) * input[2] + w]);
                    }
                }
            }
        }
        let rg = self.rg(a.idx);
        let value = Tensor::new(out_shape, out)?;
        self.push(
            "nearest",
            value,
            Op::Nearest {
                a: a.idx,
                batch,
                input,
                taps,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let nl = self.check(loss)?;
        if nl.value.len() != 1 {
            return Err(TensorError::NotScalar(nl.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(vec![T::ONE]);

        for idx in (0..=loss.idx).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![T::ZERO; node.value.len()]);
                Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], idx: usize) -> Option<&'g mut Vec<T>> {
        if !self.nodes[idx].requires_grad {
            return None;
        }
        let n = self.nodes[idx].value.len();
        Some(grads[idx].get_or_insert_with(|| vec![T::ZERO; n]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |i: usize| self.nodes[i].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::ONE } else { T::ONE };
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let bl = gb.len();
                    for (i, &s) in g.iter().enumerate() {
                        gb[i % bl] += sign * s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let bl = bv.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &s) in g.iter().enumerate() {
                        ga[i] += s * bv[i % bl];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, &s) in g.iter().enumerate() {
                        gb[i % bl] += s * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = T::from_f64(*c);
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s * c);
                }
            }
            Op::Shift(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            &Op::MatMul {
                a,
                b,
                shared_rhs,
                batch,
                m,
                k,
                n,
            } => {
                let (av, bv) = (val(a), val(b));
                if let Some(ga) = self.acc(grads, a) {
                    if shared_rhs {
                        kernels::matmul_grad_lhs(g, bv, ga, batch * m, k, n);
                    } else {
                        for i in 0..batch {
                            kernels::matmul_grad_lhs(
                                &g[i * m * n..(i + 1) * m * n],
                                &bv[i * k * n..(i + 1) * k * n],
                                &mut ga[i * m * k..(i + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    if shared_rhs {
                        kernels::matmul_grad_rhs(av, g, gb, batch * m, k, n);
                    } else {
                        for i in 0..batch {
                            kernels::matmul_grad_rhs(
                                &av[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut gb[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            Op::Gather { a, map } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (&src, &s) in map.iter().zip(g) {
                        ga[src] += s;
                    }
                }
            }
            Op::Concat { parts, outer } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    if let Some(gp) = self.acc(grads, p) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            gp[o * w..(o + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += w;
                }
            }
            &Op::Slice {
                a,
                outer,
                in_width,
                start,
            } => {
                let w = g.len() / outer;
                if let Some(ga) = self.acc(grads, a) {
                    for o in 0..outer {
                        ga[o * in_width + start..o * in_width + start + w]
                            .iter_mut()
                            .zip(&g[o * w..(o + 1) * w])
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / T::from_f64(ga.len() as f64);
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::LayerNorm { a, width, rstd } => {
                let y = node.value.data();
                let wn = T::from_f64(*width as f64);
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * width..(r + 1) * width;
                        let (gr, yr) = (&g[span.clone()], &y[span.clone()]);
                        let mg = gr.iter().copied().sum::<T>() / wn;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / wn;
                        for ((d, &gi), &yi) in ga[span].iter_mut().zip(gr).zip(yr) {
                            *d += rs * (gi - mg - yi * mgy);
                        }
                    }
                }
            }
            Op::Softmax { a, width } => {
                let y = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, gr), yr) in ga
                        .chunks_exact_mut(*width)
                        .zip(g.chunks_exact(*width))
                        .zip(y.chunks_exact(*width))
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((di, &gi), &yi) in d.iter_mut().zip(gr).zip(yr) {
                            *di += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = val(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, &s), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *d += s * gelu_grad(xi);
                    }
                }
            }
            Op::Silu(a) => {
                let x = val(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, &s), &xi) in ga.iter_mut().zip(g).zip(x) {
                        let sg = sigmoid(xi);
                        *d += s * (sg + xi * sg * (T::ONE - sg));
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, &s), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *d += s * yi * (T::ONE - yi);
                    }
                }
            }
            Op::Clamp { a, lo, hi } => {
                let x = val(*a);
                let (l, h) = (T::from_f64(*lo), T::from_f64(*hi));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, &s), &xi) in ga.iter_mut().zip(g).zip(x) {
                        if xi >= l && xi <= h {
                            *d += s;
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let c = T::from_f64(2.0) * g[0] / T::from_f64(av.len() as f64);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                        *d += c * (x - y);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((d, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                        *d -= c * (x - y);
                    }
                }
            }
            Op::Trilinear {
                a,
                batch,
                input,
                taps,
            } => {
                if let Some(ga) = self.acc(grads, *a) {
                    let in_vol = input[0] * input[1] * input[2];
                    let mut it = g.iter();
                    for b in 0..*batch {
                        let vol = &mut ga[b * in_vol..(b + 1) * in_vol];
                        for tf in &taps[0] {
                            for th in &taps[1] {
                                for tw in &taps[2] {
                                    let s = it.next().copied().unwrap_or(T::ZERO).to_f64();
                                    for (f, wf) in [(tf.lo, 1.0 - tf.w_hi), (tf.hi, tf.w_hi)] {
                                        for (h, wh) in [(th.lo, 1.0 - th.w_hi), (th.hi, th.w_hi)] {
                                            for (w, ww) in
                                                [(tw.lo, 1.0 - tw.w_hi), (tw.hi, tw.w_hi)]
                                            {
                                                let idx = (f * input[1] + h) * input[2] + w;
                                                vol[idx] += T::from_f64(wf * wh * ww * s);
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Nearest {
                a,
                batch,
                input,
                taps,
            } => {
                if let Some(ga) = self.acc(grads, *a) {
                    let in_vol = input[0] * input[1] * input[2];
                    let mut it = g.iter();
                    for b in 0..*batch {
                        for &f in &taps[0] {
                            for &h in &taps[1] {
                                for &w in &taps[2] {
                                    let s = *it.next().expect("gradient length");
                                    ga[b * in_vol + (f * input[1] + h) * input[2] + w] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
