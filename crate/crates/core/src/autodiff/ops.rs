use std::sync::Arc;

use rayon::prelude::*;

use super::gemm::gemm;
use super::tensor::{numel_of, Op, Tensor};

/// Numpy-style broadcast of two shapes (right-aligned).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Vec<usize> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r {
            a[i + a.len() - r]
        } else {
            1
        };
        let db = if i + b.len() >= r {
            b[i + b.len() - r]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
        };
    }
    out
}

/// Per-output-axis strides into a tensor of `in_shape` broadcast to `out_shape`.
fn broadcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let r = out_shape.len();
    assert!(
        in_shape.len() <= r,
        "cannot broadcast {in_shape:?} to {out_shape:?}"
    );
    let off = r - in_shape.len();
    let mut strides = vec![0; r];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        let d = in_shape[i];
        if d == 1 {
            strides[i + off] = 0;
        } else {
            assert_eq!(
                d,
                out_shape[i + off],
                "cannot broadcast {in_shape:?} to {out_shape:?}"
            );
            strides[i + off] = acc;
        }
        acc *= d;
    }
    strides
}

/// Walks `shape` in row-major order, calling `f(linear_index, strided_offset)`.
fn walk(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel_of(shape);
    if n == 0 {
        return;
    }
    let r = shape.len();
    if r == 0 {
        f(0, 0);
        return;
    }
    let (inner, step) = (shape[r - 1], strides[r - 1]);
    let mut idx = vec![0usize; r - 1];
    let mut off = 0usize;
    let mut lin = 0usize;
    loop {
        for j in 0..inner {
            f(lin + j, off + j * step);
        }
        lin += inner;
        if lin == n {
            return;
        }
        let mut d = r - 2;
        loop {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= strides[d] * shape[d];
            idx[d] = 0;
            d -= 1;
        }
    }
}

/// Transposes each of `batch` row-major `rows x cols` matrices.
fn transpose_blocks(src: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    const TILE: usize = 32;
    let mut out = vec![0.0; src.len()];
    let per = rows * cols;
    for b in 0..batch {
        let (s, d) = (
            &src[b * per..(b + 1) * per],
            &mut out[b * per..(b + 1) * per],
        );
        for i0 in (0..rows).step_by(TILE) {
            for j0 in (0..cols).step_by(TILE) {
                for i in i0..(i0 + TILE).min(rows) {
                    for j in j0..(j0 + TILE).min(cols) {
                        d[j * rows + i] = s[i * cols + j];
                    }
                }
            }
        }
    }
    out
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn map_unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.data().iter().map(|&v| f(v)).collect()
}

impl Tensor {
    fn zip_same(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.data()
            .iter()
            .zip(other.data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    /// Expands both operands to their common broadcast shape.
    fn broadcast_pair(&self, other: &Tensor) -> (Tensor, Tensor) {
        if self.shape() == other.shape() {
            return (self.clone(), other.clone());
        }
        let shape = broadcast_shapes(self.shape(), other.shape());
        (self.expand(&shape), other.expand(&shape))
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let (a, b) = self.broadcast_pair(other);
        let data = a.zip_same(&b, |x, y| x + y);
        let shape = a.shape().to_vec();
        Tensor::from_op(data, shape, Op::Add(a, b))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let (a, b) = self.broadcast_pair(other);
        let data = a.zip_same(&b, |x, y| x - y);
        let shape = a.shape().to_vec();
        Tensor::from_op(data, shape, Op::Sub(a, b))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let (a, b) = self.broadcast_pair(other);
        let data = a.zip_same(&b, |x, y| x * y);
        let shape = a.shape().to_vec();
        Tensor::from_op(data, shape, Op::Mul(a, b))
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let (a, b) = self.broadcast_pair(other);
        let data = a.zip_same(&b, |x, y| x / y);
        let shape = a.shape().to_vec();
        Tensor::from_op(data, shape, Op::Div(a, b))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor::from_op(
            map_unary(self, |v| v * s),
            self.shape().to_vec(),
            Op::Scale(self.clone(), s),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        Tensor::from_op(
            map_unary(self, |v| v + s),
            self.shape().to_vec(),
            Op::AddScalar(self.clone()),
        )
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn relu(&self) -> Tensor {
        Tensor::from_op(
            map_unary(self, |v| v.max(0.0)),
            self.shape().to_vec(),
            Op::Relu(self.clone()),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        Tensor::from_op(
            map_unary(self, |v| if v > 0.0 { v } else { slope * v }),
            self.shape().to_vec(),
            Op::LeakyRelu(self.clone(), slope),
        )
    }

    pub fn tanh(&self) -> Tensor {
        Tensor::from_op(
            map_unary(self, f64::tanh),
            self.shape().to_vec(),
            Op::Tanh(self.clone()),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        Tensor::from_op(
            map_unary(self, |v| 1.0 / (1.0 + (-v).exp())),
            self.shape().to_vec(),
            Op::Sigmoid(self.clone()),
        )
    }

    pub fn exp(&self) -> Tensor {
        Tensor::from_op(
            map_unary(self, f64::exp),
            self.shape().to_vec(),
            Op::Exp(self.clone()),
        )
    }

    pub fn ln(&self) -> Tensor {
        Tensor::from_op(
            map_unary(self, f64::ln),
            self.shape().to_vec(),
            Op::Ln(self.clone()),
        )
    }

    pub fn sqrt(&self) -> Tensor {
        Tensor::from_op(
            map_unary(self, f64::sqrt),
            self.shape().to_vec(),
            Op::Sqrt(self.clone()),
        )
    }

    pub fn abs(&self) -> Tensor {
        Tensor::from_op(
            map_unary(self, f64::abs),
            self.shape().to_vec(),
            Op::Abs(self.clone()),
        )
    }

    /// Broadcasts to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let strides = broadcast_strides(self.shape(), shape);
        let src = self.data();
        let mut data = vec![0.0; numel_of(shape)];
        walk(shape, &strides, |lin, off| data[lin] = src[off]);
        Tensor::from_op(data, shape.to_vec(), Op::Expand(self.clone()))
    }

    /// Sums over broadcast axes so the result has `shape` (the adjoint of `expand`).
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let strides = broadcast_strides(shape, self.shape());
        let src = self.data();
        let mut data = vec![0.0; numel_of(shape)];
        walk(self.shape(), &strides, |lin, off| data[off] += src[lin]);
        Tensor::from_op(data, shape.to_vec(), Op::SumTo(self.clone()))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over the given axes, keeping them as size-1 dimensions.
    pub fn sum_keepdim(&self, axes: &[usize]) -> Tensor {
        let mut shape = self.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel_of(shape),
            self.numel(),
            "cannot reshape {:?} to {:?}",
            self.shape(),
            shape
        );
        Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape(self.clone()))
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        assert_eq!(perm.len(), self.rank());
        let in_strides = contiguous_strides(self.shape());
        let shape: Vec<usize> = perm.iter().map(|&p| self.dim(p)).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let src = self.data();
        let r = perm.len();
        let swaps_last = r >= 2
            && perm[r - 2] == r - 1
            && perm[r - 1] == r - 2
            && perm[..r - 2].iter().enumerate().all(|(i, &p)| i == p);
        let data = if swaps_last {
            let (rows, cols) = (self.dim(r - 2), self.dim(r - 1));
            transpose_blocks(src, numel_of(&self.shape()[..r - 2]), rows, cols)
        } else {
            let mut data = vec![0.0; self.numel()];
            walk(&shape, &strides, |lin, off| data[lin] = src[off]);
            data
        };
        Tensor::from_op(data, shape, Op::Permute(self.clone(), perm.to_vec()))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose_last(&self) -> Tensor {
        self.permute(&[0, 2, 1])
    }

    /// Batched matrix product `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(&self, other: &Tensor) -> Tensor {
        self.bmm_t(other, false, false)
    }

    /// Batched `op(self) x op(other)`, where `op` transposes the last two
    /// axes when the matching flag is set. Avoids materializing transposes.
    pub fn bmm_t(&self, other: &Tensor, ta: bool, tb: bool) -> Tensor {
        assert_eq!(self.rank(), 3, "bmm lhs must be rank 3");
        assert_eq!(other.rank(), 3, "bmm rhs must be rank 3");
        let b = self.dim(0);
        let (m, k) = if ta {
            (self.dim(2), self.dim(1))
        } else {
            (self.dim(1), self.dim(2))
        };
        let (k2, n) = if tb {
            (other.dim(2), other.dim(1))
        } else {
            (other.dim(1), other.dim(2))
        };
        assert_eq!(other.dim(0), b, "bmm batch mismatch");
        assert_eq!(k2, k, "bmm inner mismatch");
        let mut data = vec![0.0; b * m * n];
        let (lhs, rhs) = (self.data(), other.data());
        data.par_chunks_mut(m * n).enumerate().for_each(|(i, c)| {
            gemm(
                m,
                k,
                n,
                &lhs[i * m * k..(i + 1) * m * k],
                ta,
                &rhs[i * k * n..(i + 1) * k * n],
                tb,
                c,
                0.0,
            );
        });
        Tensor::from_op(
            data,
            vec![b, m, n],
            Op::Bmm(self.clone(), other.clone(), ta, tb),
        )
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let cols = *self.shape().last().expect("softmax of a scalar");
        let mut data = self.to_vec();
        data.par_chunks_mut(cols).for_each(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        });
        Tensor::from_op(data, self.shape().to_vec(), Op::Softmax(self.clone()))
    }

    /// Backward of `softmax_last`: `s * (g - sum(g * s))` row by row, with
    /// `self` the softmax output `s`.
    fn softmax_grad(&self, g: &Tensor) -> Tensor {
        assert_eq!(self.shape(), g.shape());
        let cols = *self.shape().last().expect("softmax of a scalar");
        let mut data = vec![0.0; self.numel()];
        data.par_chunks_mut(cols)
            .zip(self.data().par_chunks(cols))
            .zip(g.data().par_chunks(cols))
            .for_each(|((y, s), g)| {
                let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
                for ((y, s), g) in y.iter_mut().zip(s).zip(g) {
                    *y = s * (g - dot);
                }
            });
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::SoftmaxGrad(self.clone(), g.clone()),
        )
    }

    /// `out[i] = self[indices[i]]` over the flattened tensor.
    pub fn gather_flat(&self, indices: Arc<[usize]>, shape: &[usize]) -> Tensor {
        assert_eq!(indices.len(), numel_of(shape));
        let src = self.data();
        let data = indices.iter().map(|&i| src[i]).collect();
        Tensor::from_op(data, shape.to_vec(), Op::Gather(self.clone(), indices))
    }

    /// Adjoint of `gather_flat`: `out[indices[i]] += self[i]`.
    pub fn scatter_add_flat(&self, indices: Arc<[usize]>, shape: &[usize]) -> Tensor {
        assert_eq!(indices.len(), self.numel());
        let mut data = vec![0.0; numel_of(shape)];
        for (&i, &v) in indices.iter().zip(self.data()) {
            data[i] += v;
        }
        Tensor::from_op(data, shape.to_vec(), Op::ScatterAdd(self.clone(), indices))
    }

    /// Non-overlapping `k x k` max pooling over an NCHW tensor.
    pub fn max_pool2d(&self, k: usize) -> Tensor {
        assert_eq!(self.rank(), 4, "max_pool2d expects NCHW");
        let (n, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (oh, ow) = (h / k, w / k);
        let src = self.data();
        let mut idx = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let p = base + (oy * k + dy) * w + ox * k + dx;
                            if src[p] > src[best] {
                                best = p;
                            }
                        }
                    }
                    idx.push(best);
                }
            }
        }
        self.gather_flat(idx.into(), &[n, c, oh, ow])
    }

    pub fn concat(tensors: &[Tensor], axis: usize) -> Tensor {
        assert!(!tensors.is_empty());
        let first = tensors[0].shape();
        let mut shape = first.to_vec();
        shape[axis] = tensors.iter().map(|t| t.dim(axis)).sum();
        for t in tensors {
            for (d, (&x, &y)) in t.shape().iter().zip(first).enumerate() {
                assert!(d == axis || x == y, "concat shape mismatch");
            }
        }
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            for t in tensors {
                let block = t.dim(axis) * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        Tensor::from_op(data, shape, Op::Concat(tensors.to_vec(), axis))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let (outer, dim, inner) = split_at_axis(self.shape(), axis);
        assert!(start + len <= dim, "narrow out of range");
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        Tensor::from_op(data, shape, Op::Narrow(self.clone(), axis, start))
    }

    /// Places `self` at `start` along `axis` inside zeros of length `full`.
    pub fn embed(&self, axis: usize, start: usize, full: usize) -> Tensor {
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        assert!(start + len <= full);
        let mut shape = self.shape().to_vec();
        shape[axis] = full;
        let mut data = vec![0.0; numel_of(&shape)];
        for o in 0..outer {
            let dst = o * full * inner + start * inner;
            data[dst..dst + len * inner]
                .copy_from_slice(&self.data()[o * len * inner..(o + 1) * len * inner]);
        }
        Tensor::from_op(data, shape, Op::Embed(self.clone(), axis, start))
    }
}

fn constant_like(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(map_unary(t, f), t.shape())
}

impl Op {
    /// Gradients of the inputs given the output and its incoming gradient.
    /// `needs[i]` is false for inputs whose gradient is not wanted.
    pub(crate) fn backward(&self, out: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        use Op::*;
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        match self {
            Add(_, _) => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
            Sub(_, _) => vec![want(0).then(|| g.clone()), want(1).then(|| g.neg())],
            Mul(a, b) => vec![want(0).then(|| g.mul(b)), want(1).then(|| g.mul(a))],
            Div(_, b) => vec![
                want(0).then(|| g.div(b)),
                want(1).then(|| g.mul(out).div(b).neg()),
            ],
            Scale(_, s) => vec![Some(g.scale(*s))],
            AddScalar(_) => vec![Some(g.clone())],
            Expand(a) => vec![Some(g.sum_to(a.shape()))],
            SumTo(a) => vec![Some(g.expand(a.shape()))],
            Relu(a) => vec![Some(g.mul(&constant_like(a, |v| {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            })))],
            LeakyRelu(a, s) => {
                vec![Some(g.mul(&constant_like(a, |v| {
                    if v > 0.0 {
                        1.0
                    } else {
                        *s
                    }
                })))]
            }
            Tanh(_) => vec![Some(g.mul(&out.square().neg().add_scalar(1.0)))],
            Sigmoid(_) => vec![Some(g.mul(&out.mul(&out.neg().add_scalar(1.0))))],
            Exp(_) => vec![Some(g.mul(out))],
            Ln(a) => vec![Some(g.div(a))],
            Sqrt(_) => vec![Some(g.div(&out.scale(2.0)))],
            Abs(a) => vec![Some(g.mul(&constant_like(a, f64::signum)))],
            Reshape(a) => vec![Some(g.reshape(a.shape()))],
            Permute(_, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![Some(g.permute(&inv))]
            }
            Bmm(a, b, ta, tb) => {
                let (ta, tb) = (*ta, *tb);
                let da = || match (ta, tb) {
                    (false, false) => g.bmm_t(b, false, true),
                    (false, true) => g.bmm_t(b, false, false),
                    (true, false) => b.bmm_t(g, false, true),
                    (true, true) => b.bmm_t(g, true, true),
                };
                let db = || match (ta, tb) {
                    (false, false) => a.bmm_t(g, true, false),
                    (false, true) => g.bmm_t(a, true, false),
                    (true, false) => a.bmm_t(g, false, false),
                    (true, true) => g.bmm_t(a, true, true),
                };
                vec![want(0).then(da), want(1).then(db)]
            }
            Softmax(_) => vec![Some(out.softmax_grad(g))],
            // y = s * (h - <h, s>) per row; linear in h, quadratic in s.
            SoftmaxGrad(s, h) => {
                let last = [s.rank() - 1];
                vec![
                    want(0).then(|| {
                        let d = h.mul(s).sum_keepdim(&last);
                        let e = g.mul(s).sum_keepdim(&last);
                        g.mul(&h.sub(&d)).sub(&h.mul(&e))
                    }),
                    want(1).then(|| s.softmax_grad(g)),
                ]
            }
            Conv(x, w, geom) => vec![
                want(0).then(|| g.conv_input_grad(w, *geom)),
                want(1).then(|| x.conv_weight_grad(g, *geom)),
            ],
            // z = convT(h, w): linear in both h and w.
            ConvInputGrad(h, w, geom) => vec![
                want(0).then(|| g.conv2d_geom(w, *geom)),
                want(1).then(|| g.conv_weight_grad(h, *geom)),
            ],
            // k = wgrad(x, h): linear in both x and h.
            ConvWeightGrad(x, h, geom) => vec![
                want(0).then(|| h.conv_input_grad(g, *geom)),
                want(1).then(|| x.conv2d_geom(g, *geom)),
            ],
            Gather(a, idx) => vec![Some(g.scatter_add_flat(idx.clone(), a.shape()))],
            ScatterAdd(a, idx) => vec![Some(g.gather_flat(idx.clone(), a.shape()))],
            Concat(ts, axis) => {
                let mut start = 0;
                ts.iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let len = t.dim(*axis);
                        let r = want(i).then(|| g.narrow(*axis, start, len));
                        start += len;
                        r
                    })
                    .collect()
            }
            Narrow(a, axis, start) => vec![Some(g.embed(*axis, *start, a.dim(*axis)))],
            Embed(a, axis, start) => vec![Some(g.narrow(*axis, *start, a.dim(*axis)))],
        }
    }
}
