//! Elementwise arithmetic, reductions, layout operations, matmul and softmax.

use super::{numel_of, Element, Tensor};
use crate::error::{Error, Result};

/// `sqrt(2 / pi)`, the scale inside the tanh form of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh form of GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each element of `out`, the flat index of the element of `src` it reads
/// under broadcasting. `None` when `src` already has the output shape.
fn broadcast_map(out: &[usize], src: &[usize]) -> Option<Vec<usize>> {
    if out == src {
        return None;
    }
    let offset = out.len() - src.len();
    let src_strides = strides_of(src);
    let eff: Vec<usize> = (0..out.len())
        .map(|i| {
            if i < offset || src[i - offset] == 1 {
                0
            } else {
                src_strides[i - offset]
            }
        })
        .collect();
    let total = numel_of(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            pos += eff[d];
            if idx[d] < out[d] {
                break;
            }
            pos -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

fn reduce_to<T: Element>(g: Vec<T>, map: &Option<Vec<usize>>, src_len: usize) -> Vec<T> {
    match map {
        None => g,
        Some(m) => {
            let mut acc = vec![T::zero(); src_len];
            for (gi, &si) in g.iter().zip(m) {
                acc[si] += *gi;
            }
            acc
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl<T: Element> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, op: BinOp) -> Result<Tensor<T>> {
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        let out_shape = broadcast_shape(self.shape(), other.shape()).ok_or_else(|| {
            Error::shape(
                name,
                "broadcast",
                format!("{:?} and {:?} do not broadcast", self.shape(), other.shape()),
            )
        })?;
        let map_a = broadcast_map(&out_shape, self.shape());
        let map_b = broadcast_map(&out_shape, other.shape());
        let (a, b) = (self.data(), other.data());
        let n = numel_of(&out_shape);
        let f = |x: T, y: T| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let data: Vec<T> = match (&map_a, &map_b) {
            (None, None) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|i| {
                    let ia = map_a.as_ref().map_or(i, |m| m[i]);
                    let ib = map_b.as_ref().map_or(i, |m| m[i]);
                    f(a[ia], b[ib])
                })
                .collect(),
        };

        let (lhs, rhs) = (self.clone(), other.clone());
        let backward = Box::new(move |g: &[T], needs: &[bool]| {
            let (a, b) = (lhs.data(), rhs.data());
            let ia = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
            let ib = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
            let ga = needs[0].then(|| {
                let full: Vec<T> = match op {
                    BinOp::Add | BinOp::Sub => g.to_vec(),
                    BinOp::Mul => g.iter().enumerate().map(|(i, &gi)| gi * b[ib(i)]).collect(),
                    BinOp::Div => g.iter().enumerate().map(|(i, &gi)| gi / b[ib(i)]).collect(),
                };
                reduce_to(full, &map_a, a.len())
            });
            let gb = needs[1].then(|| {
                let full: Vec<T> = match op {
                    BinOp::Add => g.to_vec(),
                    BinOp::Sub => g.iter().map(|&gi| -gi).collect(),
                    BinOp::Mul => g.iter().enumerate().map(|(i, &gi)| gi * a[ia(i)]).collect(),
                    BinOp::Div => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            let y = b[ib(i)];
                            -gi * a[ia(i)] / (y * y)
                        })
                        .collect(),
                };
                reduce_to(full, &map_b, b.len())
            });
            vec![ga, gb]
        });
        Ok(Tensor::from_op(
            out_shape,
            data,
            name,
            vec![self.clone(), other.clone()],
            backward,
        ))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Div)
    }

    /// Applies `f` elementwise; `df(x)` is the derivative at input `x`.
    fn unary<F, D>(&self, name: &'static str, f: F, df: D) -> Tensor<T>
    where
        F: Fn(T) -> T,
        D: Fn(T) -> T + Send + Sync + 'static,
    {
        let data = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            let grad = g
                .iter()
                .zip(input.data())
                .map(|(&gi, &x)| gi * df(x))
                .collect();
            vec![Some(grad)]
        });
        Tensor::from_op(self.shape().to_vec(), data, name, vec![self.clone()], backward)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<T> {
        let s = T::lit(s);
        self.unary("add_scalar", move |x| x + s, |_| T::one())
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor<T> {
        let s = T::lit(s);
        self.unary("mul_scalar", move |x| x * s, move |_| s)
    }

    /// `x / s`, rounded as a true division rather than a reciprocal product.
    pub fn div_scalar(&self, s: f64) -> Tensor<T> {
        let s = T::lit(s);
        self.unary("div_scalar", move |x| x / s, move |_| T::one() / s)
    }

    /// Like [`Tensor::div_scalar`] with a divisor already in `T`.
    pub fn div_by(&self, s: T) -> Tensor<T> {
        self.unary("div_scalar", move |x| x / s, move |_| T::one() / s)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |x| -x, |_| -T::one())
    }

    /// `x^p`. The derivative at a zero base is taken as zero.
    pub fn powf(&self, p: f64) -> Tensor<T> {
        let pt = T::lit(p);
        self.unary(
            "powf",
            move |x| x.powf(pt),
            move |x| {
                if x == T::zero() {
                    T::zero()
                } else {
                    pt * x.powf(pt - T::one())
                }
            },
        )
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&self) -> Tensor<T> {
        self.unary(
            "abs",
            |x| x.abs(),
            |x| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// `ln(1 + x)`.
    pub fn ln_1p(&self) -> Tensor<T> {
        self.unary("ln_1p", |x| x.ln_1p(), |x| T::one() / (T::one() + x))
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |x| x.exp(), |x| x.exp())
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(
            "tanh",
            |x| x.tanh(),
            |x| {
                let t = x.tanh();
                T::one() - t * t
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary("sigmoid", sigmoid, |x| {
            let s = sigmoid(x);
            s * (T::one() - s)
        })
    }

    /// `max(x, lo)`; gradient passes only where `x > lo`. NaN propagates.
    pub fn clamp_min(&self, lo: f64) -> Tensor<T> {
        let lo = T::lit(lo);
        self.unary(
            "clamp_min",
            move |x| if x > lo || x.is_nan() { x } else { lo },
            move |x| if x > lo { T::one() } else { T::zero() },
        )
    }

    /// GELU, tanh form:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Tensor<T> {
        self.unary("gelu", gelu, gelu_grad)
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().fold(0.0f64, |acc, &x| acc + x.as_f64());
        let n = self.numel();
        let backward = Box::new(move |g: &[T], _: &[bool]| vec![Some(vec![g[0]; n])]);
        Tensor::from_op(vec![1], vec![T::lit(s)], "sum_all", vec![self.clone()], backward)
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel();
        let s = self.data().iter().fold(0.0f64, |acc, &x| acc + x.as_f64());
        let inv = T::lit(1.0 / n as f64);
        let backward = Box::new(move |g: &[T], _: &[bool]| vec![Some(vec![g[0] * inv; n])]);
        Tensor::from_op(
            vec![1],
            vec![T::lit(s / n as f64)],
            "mean_all",
            vec![self.clone()],
            backward,
        )
    }

    /// Mean over the spatial axes of `[B, C, H, W]`, keeping them as size 1.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let [b, c, h, w] = self.dims4("global_avg_pool")?;
        let plane = h * w;
        let inv = T::lit(1.0 / plane as f64);
        let data: Vec<T> = self
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().fold(T::zero(), |acc, &x| acc + x) * inv)
            .collect();
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            let mut out = Vec::with_capacity(g.len() * plane);
            for &gi in g {
                out.extend(std::iter::repeat_n(gi * inv, plane));
            }
            vec![Some(out)]
        });
        Ok(Tensor::from_op(
            vec![b, c, 1, 1],
            data,
            "global_avg_pool",
            vec![self.clone()],
            backward,
        ))
    }

    /// Same data, new shape with an equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                "numel",
                format!("cannot view {:?} as {:?}", self.shape(), shape),
            ));
        }
        let backward = Box::new(|g: &[T], _: &[bool]| vec![Some(g.to_vec())]);
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            "reshape",
            vec![self.clone()],
            backward,
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid(
                "permute",
                format!("{axes:?} is not a permutation of {nd} axes"),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let map = permute_map(self.shape(), axes);
        let src = self.data();
        let data: Vec<T> = map.iter().map(|&i| src[i]).collect();
        let n = self.numel();
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            let mut out = vec![T::zero(); n];
            for (gi, &si) in g.iter().zip(&map) {
                out[si] = *gi;
            }
            vec![Some(out)]
        });
        Ok(Tensor::from_op(out_shape, data, "permute", vec![self.clone()], backward))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(Error::invalid("narrow", format!("axis {axis} out of range")));
        }
        let extent = self.shape()[axis];
        if start + len > extent {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis}"),
                format!("range {start}..{} exceeds extent {extent}", start + len),
            ));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = self.numel();
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            let mut out = vec![T::zero(); n];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                out[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(out)]
        });
        Ok(Tensor::from_op(shape, data, "narrow", vec![self.clone()], backward))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(tensors: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::invalid("concat", "no tensors given"))?;
        let nd = first.ndim();
        if axis >= nd {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        for t in tensors {
            if t.ndim() != nd {
                return Err(Error::shape("concat", "ndim", format!("{:?} vs {:?}", first.shape(), t.shape())));
            }
            for d in 0..nd {
                if d != axis && t.shape()[d] != first.shape()[d] {
                    return Err(Error::shape(
                        "concat",
                        format!("axis {d}"),
                        format!("{:?} vs {:?}", first.shape(), t.shape()),
                    ));
                }
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let extents: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &e) in tensors.iter().zip(&extents) {
                data.extend_from_slice(&t.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let ext = extents.clone();
        let backward = Box::new(move |g: &[T], needs: &[bool]| {
            let mut grads: Vec<Option<Vec<T>>> = ext
                .iter()
                .zip(needs)
                .map(|(&e, &need)| need.then(|| Vec::with_capacity(outer * e * inner)))
                .collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gr, &e) in grads.iter_mut().zip(&ext) {
                    if let Some(v) = gr {
                        v.extend_from_slice(&g[pos..pos + e * inner]);
                    }
                    pos += e * inner;
                }
            }
            grads
        });
        Ok(Tensor::from_op(
            shape,
            data,
            "concat",
            tensors.iter().map(|t| (*t).clone()).collect(),
            backward,
        ))
    }

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`. Leading
    /// (batch) axes must match exactly.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sa.len() != sb.len() {
            return Err(Error::shape("matmul", "ndim", format!("{sa:?} x {sb:?}")));
        }
        let nd = sa.len();
        if sa[..nd - 2] != sb[..nd - 2] {
            return Err(Error::shape("matmul", "batch", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[nd - 2], sa[nd - 1], sb[nd - 1]);
        if sb[nd - 2] != k {
            return Err(Error::shape(
                "matmul",
                format!("axis {}", nd - 2),
                format!("inner extents differ: {sa:?} x {sb:?}"),
            ));
        }
        let batch: usize = sa[..nd - 2].iter().product();
        let mut data = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm_nn(
                &self.data()[bi * m * k..(bi + 1) * m * k],
                &other.data()[bi * k * n..(bi + 1) * k * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa.to_vec();
        shape[nd - 1] = n;
        let (lhs, rhs) = (self.clone(), other.clone());
        let backward = Box::new(move |g: &[T], needs: &[bool]| {
            let (a, b) = (lhs.data(), rhs.data());
            let ga = needs[0].then(|| {
                // dA = dC * B^T
                let mut ga = vec![T::zero(); batch * m * k];
                for bi in 0..batch {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let bb = &b[bi * k * n..(bi + 1) * k * n];
                    let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = T::zero();
                            for j in 0..n {
                                acc += gc[i * n + j] * bb[p * n + j];
                            }
                            out[i * k + p] = acc;
                        }
                    }
                }
                ga
            });
            let gb = needs[1].then(|| {
                // dB = A^T * dC
                let mut gb = vec![T::zero(); batch * k * n];
                for bi in 0..batch {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let aa = &a[bi * m * k..(bi + 1) * m * k];
                    let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = aa[i * k + p];
                            let row = &gc[i * n..(i + 1) * n];
                            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(row) {
                                *o += av * gv;
                            }
                        }
                    }
                }
                gb
            });
            vec![ga, gb]
        });
        Ok(Tensor::from_op(shape, data, "matmul", vec![self.clone(), other.clone()], backward))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(Error::shape("transpose_last", "ndim", format!("{:?}", self.shape())));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    /// Softmax along `axis`, computed with the running max subtracted.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range")));
        }
        let len = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let src = self.data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(src[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    data[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    data[at(j)] = data[at(j)] / sum;
                }
            }
        }
        let y = data.clone();
        let backward = Box::new(move |g: &[T], _: &[bool]| {
            let mut out = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let mut dot = T::zero();
                    for j in 0..len {
                        dot += g[at(j)] * y[at(j)];
                    }
                    for j in 0..len {
                        out[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(out)]
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "softmax",
            vec![self.clone()],
            backward,
        ))
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape() {
            &[b, c, h, w] => Ok([b, c, h, w]),
            s => Err(Error::shape(op, "ndim", format!("expected [B, C, H, W], got {s:?}"))),
        }
    }
}

/// `c += a * b` for row-major `a: m x k`, `b: k x n`, `c: m x n`.
fn gemm_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = numel_of(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            pos += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            pos -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn gelu<T: Element>(x: T) -> T {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let k = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let k = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}
