//! The differentiable op set. Each op computes its forward value eagerly and,
//! when recording, captures exactly what its backward rule needs.

use super::kernels::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{numel, OpKind, Scalar, Tensor};
use crate::error::{Error, Result};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn hwc<T: Scalar>(op: &str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::dim(format!("{op}: expected H×W×C, got {s:?}"))),
    }
}

fn rows_cols<T: Scalar>(op: &str, x: &Tensor<T>) -> Result<(usize, usize)> {
    match *x.shape() {
        [n, c] => Ok((n, c)),
        ref s => Err(Error::dim(format!("{op}: expected a 2-d tensor, got {s:?}"))),
    }
}

/// Bilinear source taps for one axis, half-pixel centres, edge clamped.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

/// Row-major strides of `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output position of `shape` permuted by `axes`, the flat source index.
fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mapped: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n = numel(shape);
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        idx.push(offset);
        for d in (0..out_shape.len()).rev() {
            counter[d] += 1;
            offset += mapped[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= mapped[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    idx
}

impl<T: Scalar> Tensor<T> {
    fn map_unary(&self, kind: OpKind, f: impl Fn(T) -> T, df: fn(T, T) -> T) -> Self {
        let data: Vec<T> = self.data().iter().map(|&v| f(v)).collect();
        let out = data.clone();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            kind,
            vec![self.clone()],
            Box::new(move |g, p| {
                let x = p[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter().zip(&out))
                        .map(|(&g, (&x, &y))| g * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            OpKind::Add,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            OpKind::Sub,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]),
        ))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            OpKind::Mul,
            vec![self.clone(), other.clone()],
            Box::new(|g, p| {
                let (a, b) = (p[0].data(), p[1].data());
                let ga = p[0]
                    .requires_grad()
                    .then(|| g.iter().zip(b).map(|(&g, &b)| g * b).collect());
                let gb = p[1]
                    .requires_grad()
                    .then(|| g.iter().zip(a).map(|(&g, &a)| g * a).collect());
                vec![ga, gb]
            }),
        ))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&self, bias: &Self) -> Result<Self> {
        let c = *self.shape().last().unwrap_or(&1);
        if bias.shape() != [c] {
            return Err(Error::dim(format!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                bias.shape(),
                self.shape()
            )));
        }
        let b = bias.data();
        let data = self
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &b)| x + b))
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            OpKind::AddBias,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, p| {
                let gb = p[1].requires_grad().then(|| {
                    let mut acc = vec![T::zero(); c];
                    for row in g.chunks_exact(c) {
                        acc.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    acc
                });
                vec![Some(g.to_vec()), gb]
            }),
        ))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, factor: f64) -> Self {
        let f = T::of(factor);
        let data = self.data().iter().map(|&v| v * f).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            OpKind::Scale,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|&v| v * f).collect())]),
        )
    }

    /// Multiplication by a one-element tensor broadcast over `self`.
    pub fn mul_scalar(&self, s: &Self) -> Result<Self> {
        if s.numel() != 1 {
            return Err(Error::dim(format!(
                "mul_scalar: factor must hold one element, got {:?}",
                s.shape()
            )));
        }
        let sv = s.item();
        let data = self.data().iter().map(|&v| v * sv).collect();
        let s_shape = s.shape().to_vec();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            OpKind::MulScalar,
            vec![self.clone(), s.clone()],
            Box::new(move |g, p| {
                let sv = p[1].item();
                let gx = p[0]
                    .requires_grad()
                    .then(|| g.iter().map(|&v| v * sv).collect());
                let gs = p[1].requires_grad().then(|| {
                    debug_assert_eq!(numel(&s_shape), 1);
                    vec![g.iter().zip(p[0].data()).map(|(&g, &x)| g * x).sum()]
                });
                vec![gx, gs]
            }),
        ))
    }

    pub fn tanh(&self) -> Self {
        self.map_unary(OpKind::Tanh, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Self {
        fn f<T: Scalar>(x: T) -> T {
            let u = T::of(GELU_K) * (x + T::of(GELU_C) * x * x * x);
            T::of(0.5) * x * (T::one() + u.tanh())
        }
        fn df<T: Scalar>(x: T, _y: T) -> T {
            let u = T::of(GELU_K) * (x + T::of(GELU_C) * x * x * x);
            let t = u.tanh();
            let du = T::of(GELU_K) * (T::one() + T::of(3.0 * GELU_C) * x * x);
            T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
        }
        self.map_unary(OpKind::Gelu, f, df)
    }

    /// Elementwise absolute value; subgradient 0 at 0.
    pub fn abs(&self) -> Self {
        self.map_unary(
            OpKind::Abs,
            |v| v.abs(),
            |x, _| {
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

    /// Matrix product of `m×k` and `k×n`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k, k2, n) = match (self.shape(), other.shape()) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            (a, b) => {
                return Err(Error::dim(format!(
                    "matmul: expected 2-d operands, got {a:?} and {b:?}"
                )))
            }
        };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner dimensions of {:?} and {:?} disagree",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(m, k, n, self.data(), other.data(), &mut out);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            OpKind::MatMul,
            vec![self.clone(), other.clone()],
            Box::new(move |g, p| {
                let ga = p[0].requires_grad().then(|| {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt_acc(m, n, k, g, p[1].data(), &mut da);
                    da
                });
                let gb = p[1].requires_grad().then(|| {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn_acc(k, m, n, p[0].data(), g, &mut db);
                    db
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Batched matrix product of `B×m×k` and `B×k×n`.
    pub fn bmm(&self, other: &Self) -> Result<Self> {
        let (b, m, k, n) = match (self.shape(), other.shape()) {
            ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => (*b, *m, *k, *n),
            (a, o) => {
                return Err(Error::dim(format!(
                    "bmm: incompatible operands {a:?} and {o:?}"
                )))
            }
        };
        let mut out = vec![T::zero(); b * m * n];
        for i in 0..b {
            gemm_acc(
                m,
                k,
                n,
                &self.data()[i * m * k..(i + 1) * m * k],
                &other.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(Tensor::from_op(
            out,
            vec![b, m, n],
            OpKind::BatchMatMul,
            vec![self.clone(), other.clone()],
            Box::new(move |g, p| {
                let (a, bm) = (p[0].data(), p[1].data());
                let ga = p[0].requires_grad().then(|| {
                    let mut da = vec![T::zero(); b * m * k];
                    for i in 0..b {
                        gemm_nt_acc(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            &bm[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    da
                });
                let gb = p[1].requires_grad().then(|| {
                    let mut db = vec![T::zero(); b * k * n];
                    for i in 0..b {
                        gemm_tn_acc(
                            k,
                            m,
                            n,
                            &a[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    db
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_lastdim(&self) -> Result<Self> {
        let k = match self.shape().last() {
            Some(&k) if k >= 1 => k,
            _ => return Err(Error::dim("softmax_lastdim: tensor has no last axis")),
        };
        let mut out = self.data().to_vec();
        for row in out.chunks_exact_mut(k) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z = z + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        let y = out.clone();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            OpKind::Softmax,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); g.len()];
                for ((gr, yr), dr) in g.chunks_exact(k).zip(y.chunks_exact(k)).zip(dx.chunks_exact_mut(k)) {
                    let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = y * (g - dot);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("layer_norm: eps must be > 0, got {eps}")));
        }
        let c = *self
            .shape()
            .last()
            .ok_or_else(|| Error::dim("layer_norm: scalar input"))?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::dim(format!(
                "layer_norm: gamma {:?} / beta {:?} must have length {c}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = self.numel() / c;
        let inv_c = T::of(1.0 / c as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); self.numel()];
        let mut rstd = vec![T::zero(); rows];
        for (r, (xr, hr)) in self.data().chunks_exact(c).zip(xhat.chunks_exact_mut(c)).enumerate() {
            let mean = xr.iter().copied().sum::<T>() * inv_c;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (h, &v) in hr.iter_mut().zip(xr) {
                *h = (v - mean) * rs;
            }
        }
        let (gd, bd) = (gamma.data(), beta.data());
        let out = xhat
            .chunks_exact(c)
            .flat_map(|hr| hr.iter().zip(gd.iter().zip(bd)).map(|(&h, (&g, &b))| h * g + b))
            .collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            OpKind::LayerNorm,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, p| {
                let gamma = p[1].data();
                let dx = p[0].requires_grad().then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, ((gr, hr), dr)) in g
                        .chunks_exact(c)
                        .zip(xhat.chunks_exact(c))
                        .zip(dx.chunks_exact_mut(c))
                        .enumerate()
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for ((&g, &h), &gm) in gr.iter().zip(hr).zip(gamma) {
                            let dh = g * gm;
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * h;
                        }
                        mean_dh = mean_dh * inv_c;
                        mean_dh_h = mean_dh_h * inv_c;
                        for (((d, &g), &h), &gm) in dr.iter_mut().zip(gr).zip(hr).zip(gamma) {
                            *d = rstd[r] * (g * gm - mean_dh - h * mean_dh_h);
                        }
                    }
                    dx
                });
                let dgamma = p[1].requires_grad().then(|| {
                    let mut acc = vec![T::zero(); c];
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((a, &g), &h) in acc.iter_mut().zip(gr).zip(hr) {
                            *a = *a + g * h;
                        }
                    }
                    acc
                });
                let dbeta = p[2].requires_grad().then(|| {
                    let mut acc = vec![T::zero(); c];
                    for gr in g.chunks_exact(c) {
                        acc.iter_mut().zip(gr).for_each(|(a, &g)| *a = *a + g);
                    }
                    acc
                });
                vec![dx, dgamma, dbeta]
            }),
        ))
    }

    /// Mean softmax cross-entropy of `N×K` logits against per-row targets.
    /// `None` rows are ignored in both the sum and the normaliser; with no
    /// valid rows the loss is 0.
    pub fn cross_entropy(&self, targets: &[Option<usize>]) -> Result<Self> {
        let (n, k) = rows_cols("cross_entropy", self)?;
        if targets.len() != n {
            return Err(Error::dim(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= k) {
            return Err(Error::Data(format!("cross_entropy: label {bad} ≥ class count {k}")));
        }
        let valid = targets.iter().filter(|t| t.is_some()).count();
        let norm = if valid == 0 { T::zero() } else { T::of(1.0 / valid as f64) };
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for ((row, pr), t) in self.data().chunks_exact(k).zip(probs.chunks_exact_mut(k)).zip(targets) {
            let Some(t) = *t else { continue };
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            loss = loss + (log_z - row[t]);
            for (p, &v) in pr.iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            vec![loss * norm],
            Vec::new(),
            OpKind::CrossEntropy,
            vec![self.clone()],
            Box::new(move |g, _| {
                let scale = g[0] * norm;
                let mut dx = vec![T::zero(); n * k];
                for ((dr, pr), t) in dx.chunks_exact_mut(k).zip(probs.chunks_exact(k)).zip(&targets) {
                    let Some(t) = *t else { continue };
                    for (d, &p) in dr.iter_mut().zip(pr) {
                        *d = p * scale;
                    }
                    dr[t] = dr[t] - scale;
                }
                vec![Some(dx)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!(
                "reshape: {:?} cannot become {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            OpKind::Reshape,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(format!(
                "permute: {axes:?} is not a permutation of {r} axes"
            )));
        }
        let idx = permute_index(self.shape(), axes);
        let src = self.data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let out_shape = axes.iter().map(|&a| self.shape()[a]).collect();
        Ok(Tensor::from_op(
            data,
            out_shape,
            OpKind::Permute,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); g.len()];
                for (&i, &v) in idx.iter().zip(g) {
                    dx[i] = v;
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Self> {
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(Error::dim(format!(
                "transpose: axes ({a}, {b}) out of range for {:?}",
                self.shape()
            )));
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::dim("concat: no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::dim(format!("concat: axis {axis} out of range for rank {rank}")));
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(format!(
                    "concat: {:?} incompatible with {:?} along axis {axis}",
                    p.shape(),
                    first.shape()
                )));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        Ok(Tensor::from_op(
            data,
            shape,
            OpKind::Concat,
            parts.to_vec(),
            Box::new(move |g, p| {
                let mut grads: Vec<Option<Vec<T>>> = p
                    .iter()
                    .map(|t| t.requires_grad().then(|| Vec::with_capacity(t.numel())))
                    .collect();
                for o in 0..outer {
                    let mut off = o * total;
                    for (gv, &w) in grads.iter_mut().zip(&widths) {
                        if let Some(gv) = gv {
                            gv.extend_from_slice(&g[off..off + w]);
                        }
                        off += w;
                    }
                }
                grads
            }),
        ))
    }

    /// Slice `[start, start+len)` of `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return Err(Error::dim(format!(
                "narrow: [{start}, {}) out of range on axis {axis} of {:?}",
                start + len,
                self.shape()
            )));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let full = self.shape()[axis] * inner;
        let (off, w) = (start * inner, len * inner);
        let mut data = Vec::with_capacity(outer * w);
        for o in 0..outer {
            data.extend_from_slice(&self.data()[o * full + off..o * full + off + w]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(
            data,
            shape,
            OpKind::Narrow,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); n];
                for o in 0..outer {
                    dx[o * full + off..o * full + off + w].copy_from_slice(&g[o * w..(o + 1) * w]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    pub fn sum(&self) -> Self {
        let n = self.numel();
        Tensor::from_op(
            vec![self.data().iter().copied().sum()],
            Vec::new(),
            OpKind::Sum,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Self {
        let n = self.numel();
        let inv = T::of(1.0 / n as f64);
        Tensor::from_op(
            vec![self.data().iter().copied().sum::<T>() * inv],
            Vec::new(),
            OpKind::Mean,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0] * inv; n])]),
        )
    }

    /// Non-overlapping `k×k` average pooling of an H×W×C map.
    pub fn avg_pool2d(&self, k: usize) -> Result<Self> {
        let (h, w, c) = hwc("avg_pool2d", self)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::dim(format!(
                "avg_pool2d: {h}×{w} not divisible by kernel {k}"
            )));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = T::of(1.0 / (k * k) as f64);
        let x = self.data();
        let mut out = vec![T::zero(); oh * ow * c];
        for y in 0..h {
            for xx in 0..w {
                let o = ((y / k) * ow + xx / k) * c;
                let s = (y * w + xx) * c;
                for ch in 0..c {
                    out[o + ch] = out[o + ch] + x[s + ch];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        Ok(Tensor::from_op(
            out,
            vec![oh, ow, c],
            OpKind::AvgPool,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); h * w * c];
                for y in 0..h {
                    for xx in 0..w {
                        let o = ((y / k) * ow + xx / k) * c;
                        let s = (y * w + xx) * c;
                        for ch in 0..c {
                            dx[s + ch] = g[o + ch] * inv;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Nearest-neighbour upsampling of an H×W×C map by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Self> {
        let (h, w, c) = hwc("upsample_nearest", self)?;
        if factor == 0 {
            return Err(Error::dim("upsample_nearest: factor must be ≥ 1"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let x = self.data();
        let mut out = Vec::with_capacity(oh * ow * c);
        for y in 0..oh {
            for xx in 0..ow {
                let s = ((y / factor) * w + xx / factor) * c;
                out.extend_from_slice(&x[s..s + c]);
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![oh, ow, c],
            OpKind::UpsampleNearest,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); h * w * c];
                for y in 0..oh {
                    for xx in 0..ow {
                        let s = ((y / factor) * w + xx / factor) * c;
                        let o = (y * ow + xx) * c;
                        for ch in 0..c {
                            dx[s + ch] = dx[s + ch] + g[o + ch];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Bilinear resize of an H×W×C map to `oh×ow` (half-pixel centres).
    pub fn upsample_bilinear(&self, oh: usize, ow: usize) -> Result<Self> {
        let (h, w, c) = hwc("upsample_bilinear", self)?;
        if oh == 0 || ow == 0 {
            return Err(Error::dim("upsample_bilinear: empty output size"));
        }
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let x = self.data();
        let mut out = vec![T::zero(); oh * ow * c];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let o = (oy * ow + ox) * c;
                let taps = [
                    (y0, x0, wy0 * wx0),
                    (y0, x1, wy0 * wx1),
                    (y1, x0, wy1 * wx0),
                    (y1, x1, wy1 * wx1),
                ];
                for (iy, ix, wt) in taps {
                    if wt == 0.0 {
                        continue;
                    }
                    let wt = T::of(wt);
                    let s = (iy * w + ix) * c;
                    for ch in 0..c {
                        out[o + ch] = out[o + ch] + wt * x[s + ch];
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![oh, ow, c],
            OpKind::UpsampleBilinear,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); h * w * c];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let o = (oy * ow + ox) * c;
                        let taps = [
                            (y0, x0, wy0 * wx0),
                            (y0, x1, wy0 * wx1),
                            (y1, x0, wy1 * wx0),
                            (y1, x1, wy1 * wx1),
                        ];
                        for (iy, ix, wt) in taps {
                            if wt == 0.0 {
                                continue;
                            }
                            let wt = T::of(wt);
                            let s = (iy * w + ix) * c;
                            for ch in 0..c {
                                dx[s + ch] = dx[s + ch] + wt * g[o + ch];
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// 3×3 zero-padded patch extraction: H×W×C → (H·W)×(9·C), taps ordered
    /// (dy, dx, channel).
    pub fn unfold3x3(&self) -> Result<Self> {
        let (h, w, c) = hwc("unfold3x3", self)?;
        let x = self.data();
        let mut out = vec![T::zero(); h * w * 9 * c];
        let each = move |f: &mut dyn FnMut(usize, usize)| {
            for y in 0..h {
                for xx in 0..w {
                    for t in 0..9 {
                        let (sy, sx) = (y as isize + t as isize / 3 - 1, xx as isize + t as isize % 3 - 1);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        f(((y * w + xx) * 9 + t) * c, (sy as usize * w + sx as usize) * c);
                    }
                }
            }
        };
        each(&mut |o, s| out[o..o + c].copy_from_slice(&x[s..s + c]));
        Ok(Tensor::from_op(
            out,
            vec![h * w, 9 * c],
            OpKind::Unfold3x3,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); h * w * c];
                each(&mut |o, s| {
                    for ch in 0..c {
                        dx[s + ch] = dx[s + ch] + g[o + ch];
                    }
                });
                vec![Some(dx)]
            }),
        ))
    }

    /// Depth-to-space: H×W×(C·s²) → (H·s)×(W·s)×C. Input channel
    /// `c·s² + i·s + j` of cell (p, q) lands at pixel (p·s+i, q·s+j), channel c.
    pub fn pixel_shuffle(&self, s: usize) -> Result<Self> {
        let (h, w, cs) = hwc("pixel_shuffle", self)?;
        if s == 0 || cs % (s * s) != 0 {
            return Err(Error::dim(format!(
                "pixel_shuffle: {cs} channels not divisible by stride² = {}",
                s * s
            )));
        }
        let c = cs / (s * s);
        // [h, w, c, s, s] -> [h, s, w, s, c]
        let t = self.reshape(&[h, w, c, s, s])?.permute(&[0, 3, 1, 4, 2])?;
        let out = t.reshape(&[h * s, w * s, c])?;
        Ok(relabel(out, OpKind::PixelShuffle))
    }

    /// Space-to-depth, the inverse of [`Tensor::pixel_shuffle`].
    pub fn space_to_depth(&self, s: usize) -> Result<Self> {
        let (hs, ws, c) = hwc("space_to_depth", self)?;
        if s == 0 || hs % s != 0 || ws % s != 0 {
            return Err(Error::dim(format!(
                "space_to_depth: {hs}×{ws} not divisible by stride {s}"
            )));
        }
        let (h, w) = (hs / s, ws / s);
        let t = self.reshape(&[h, s, w, s, c])?.permute(&[0, 2, 4, 1, 3])?;
        let out = t.reshape(&[h, w, c * s * s])?;
        Ok(relabel(out, OpKind::SpaceToDepth))
    }

    /// Row gather on an N×C tensor: output row `i` is input row `index[i]`.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Self> {
        let (n, c) = rows_cols("gather_rows", self)?;
        if let Some(bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::dim(format!("gather_rows: row {bad} out of range for {n} rows")));
        }
        if index.is_empty() {
            return Err(Error::dim("gather_rows: empty index"));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        let index = index.to_vec();
        Ok(Tensor::from_op(
            out,
            vec![index.len(), c],
            OpKind::GatherRows,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); n * c];
                for (row, &i) in g.chunks_exact(c).zip(&index) {
                    for (d, &v) in dx[i * c..(i + 1) * c].iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Replaces the rows of an N×C tensor selected by `mask` with `token` (length C).
    pub fn replace_rows(&self, mask: &[bool], token: &Self) -> Result<Self> {
        let (n, c) = rows_cols("replace_rows", self)?;
        if mask.len() != n {
            return Err(Error::dim(format!(
                "replace_rows: mask of {} entries for {n} rows",
                mask.len()
            )));
        }
        if token.shape() != [c] {
            return Err(Error::dim(format!(
                "replace_rows: token {:?} does not match row width {c}",
                token.shape()
            )));
        }
        let mut out = self.data().to_vec();
        for (row, &m) in out.chunks_exact_mut(c).zip(mask) {
            if m {
                row.copy_from_slice(token.data());
            }
        }
        let mask = mask.to_vec();
        Ok(Tensor::from_op(
            out,
            vec![n, c],
            OpKind::ReplaceRows,
            vec![self.clone(), token.clone()],
            Box::new(move |g, p| {
                let dx = p[0].requires_grad().then(|| {
                    let mut dx = g.to_vec();
                    for (row, &m) in dx.chunks_exact_mut(c).zip(&mask) {
                        if m {
                            row.iter_mut().for_each(|v| *v = T::zero());
                        }
                    }
                    dx
                });
                let dt = p[1].requires_grad().then(|| {
                    let mut acc = vec![T::zero(); c];
                    for (row, &m) in g.chunks_exact(c).zip(&mask) {
                        if m {
                            acc.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                        }
                    }
                    acc
                });
                vec![dx, dt]
            }),
        ))
    }
}

/// Wraps a composite result in a single-parent identity node so that the
/// outermost op carries the requested kind.
fn relabel<T: Scalar>(t: Tensor<T>, kind: OpKind) -> Tensor<T> {
    Tensor::from_op(
        t.data().to_vec(),
        t.shape().to_vec(),
        kind,
        vec![t],
        Box::new(|g, _| vec![Some(g.to_vec())]),
    )
}
