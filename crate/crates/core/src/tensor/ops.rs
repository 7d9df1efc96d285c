use crate::error::{Error, Result};

use super::shape::{broadcast_index, broadcast_shapes, inverse_permutation, numel, permute, split_axis};
use super::{Tape, Tensor, Var};

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    /// `max(0, z)`; the subgradient at 0 is 0.
    Relu,
    /// `z` for `z > 0`, else `exp(z) - 1`.
    Elu,
    /// `z * sigmoid(z)`.
    Silu,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Silu => z * sigmoid(z),
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
            Activation::Silu => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
        }
    }

    fn op_name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Elu => "elu",
            Activation::Silu => "silu",
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `C[m, n] += sum_k A[m, k] * B[k, n]` for row-major blocks.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m * k * n == 0 {
        return;
    }
    // SAFETY: slice lengths cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            1.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `C[m, k] += sum_n G[m, n] * B[k, n]`  (G · Bᵀ).
fn gemm_nt_acc(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(g.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    if m * k * n == 0 {
        return;
    }
    // SAFETY: as above; Bᵀ is read through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0,
            g.as_ptr(), n as isize, 1,
            b.as_ptr(), 1, n as isize,
            1.0, c.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// `C[k, n] += sum_m A[m, k] * G[m, n]`  (Aᵀ · G).
fn gemm_tn_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && g.len() >= m * n && c.len() >= k * n);
    if m * k * n == 0 {
        return;
    }
    // SAFETY: as above; Aᵀ is read through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0,
            a.as_ptr(), 1, k as isize,
            g.as_ptr(), n as isize, 1,
            1.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Source index of each broadcast output element.
enum BIndex {
    /// Operand has the output shape.
    Same,
    /// Operand is a trailing block of the output (leading unit axes dropped).
    Cycle(usize),
    Map(Vec<usize>),
}

impl BIndex {
    fn new(out_shape: &[usize], in_shape: &[usize]) -> Self {
        let trimmed: &[usize] = {
            let lead = in_shape.iter().take_while(|&&d| d == 1).count();
            &in_shape[lead..]
        };
        if in_shape == out_shape {
            BIndex::Same
        } else if out_shape.ends_with(trimmed) {
            BIndex::Cycle(numel(trimmed).max(1))
        } else {
            BIndex::Map(broadcast_index(out_shape, in_shape))
        }
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            BIndex::Same => i,
            BIndex::Cycle(m) => i % m,
            BIndex::Map(v) => v[i],
        }
    }
}

impl<'t> Var<'t> {
    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.map(f);
        let y_saved = y.clone();
        self.tape().record(op, y, &[self], move |g| {
            let gx: Vec<f64> = g
                .data()
                .iter()
                .zip(x.data().iter().zip(y_saved.data()))
                .map(|(&gv, (&xv, &yv))| gv * df(xv, yv))
                .collect();
            vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
        })
    }

    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        partials: impl Fn(f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| Error::shape(op, a.shape(), b.shape()))?;
        let n = numel(&out_shape);
        let ia = BIndex::new(&out_shape, a.shape());
        let ib = BIndex::new(&out_shape, b.shape());
        let (ad, bd) = (a.data(), b.data());
        let out: Vec<f64> = (0..n).map(|i| f(ad[ia.at(i)], bd[ib.at(i)])).collect();
        let need_a = self.requires_grad();
        let need_b = other.requires_grad();
        self.tape()
            .record(op, Tensor::from_parts(out_shape, out), &[self, other], move |g| {
                let gd = g.data();
                let (ad, bd) = (a.data(), b.data());
                let mut ga = vec![0.0; if need_a { ad.len() } else { 0 }];
                let mut gb = vec![0.0; if need_b { bd.len() } else { 0 }];
                for (i, &gi) in gd.iter().enumerate() {
                    let (ja, jb) = (ia.at(i), ib.at(i));
                    let (pa, pb) = partials(ad[ja], bd[jb]);
                    if need_a {
                        ga[ja] += gi * pa;
                    }
                    if need_b {
                        gb[jb] += gi * pb;
                    }
                }
                let ga = need_a.then(|| Tensor::from_parts(a.shape().to_vec(), ga));
                let gb = need_b.then(|| Tensor::from_parts(b.shape().to_vec(), gb));
                vec![ga, gb]
            })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, |_, _| (1.0, -1.0))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, |x, y| (y, x))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |x, y| x / y, |x, y| (1.0 / y, -x / (y * y)))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn activation(self, kind: Activation) -> Result<Var<'t>> {
        if kind == Activation::Identity {
            return Ok(self);
        }
        self.unary(kind.op_name(), move |z| kind.apply(z), move |z, _| kind.derivative(z))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.activation(Activation::Relu)
    }

    pub fn elu(self) -> Result<Var<'t>> {
        self.activation(Activation::Elu)
    }

    pub fn silu(self) -> Result<Var<'t>> {
        self.activation(Activation::Silu)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let x = self.value();
        let s: f64 = x.data().iter().sum();
        let shape = x.shape().to_vec();
        self.tape().record("sum", Tensor::scalar(s), &[self], move |g| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = numel(&self.shape()) as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sum along `axis`; with `keepdim` the axis stays with extent 1.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, n, inner) = split_axis("sum_axis", x.shape(), axis)?;
        let xd = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
        }
        let in_shape = x.shape().to_vec();
        self.tape().record("sum_axis", Tensor::from_parts(shape, out), &[self], move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for j in 0..n {
                    let base = (o * n + j) * inner;
                    gx[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
        })
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t>> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::param("mean_axis", format!("axis {axis} out of range")))?;
        self.sum_axis(axis, keepdim)?.scale(1.0 / n as f64)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, n, inner) = split_axis("softmax", x.shape(), axis)?;
        let xd = x.data();
        let mut y = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..n {
                    let e = (xd[at(j)] - m).exp();
                    y[at(j)] = e;
                    s += e;
                }
                for j in 0..n {
                    y[at(j)] /= s;
                }
            }
        }
        let y = Tensor::from_parts(x.shape().to_vec(), y);
        let ys = y.clone();
        self.tape().record("softmax", y, &[self], move |g| {
            let (gd, yd) = (g.data(), ys.data());
            let mut gx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let dot: f64 = (0..n).map(|j| gd[at(j)] * yd[at(j)]).sum();
                    for j in 0..n {
                        gx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(ys.shape().to_vec(), gx))]
        })
    }

    /// `(x - mean) / sqrt(var + eps)` along `axis` (population variance, no affine).
    pub fn layer_norm(self, axis: usize, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, n, inner) = split_axis("layer_norm", x.shape(), axis)?;
        let xd = x.data();
        let mut y = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let nf = n as f64;
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mean = (0..n).map(|j| xd[at(j)]).sum::<f64>() / nf;
                let var = (0..n).map(|j| (xd[at(j)] - mean).powi(2)).sum::<f64>() / nf;
                let r = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = r;
                for j in 0..n {
                    y[at(j)] = (xd[at(j)] - mean) * r;
                }
            }
        }
        let y = Tensor::from_parts(x.shape().to_vec(), y);
        let ys = y.clone();
        self.tape().record("layer_norm", y, &[self], move |g| {
            let (gd, yd) = (g.data(), ys.data());
            let mut gx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let mg = (0..n).map(|j| gd[at(j)]).sum::<f64>() / nf;
                    let mgy = (0..n).map(|j| gd[at(j)] * yd[at(j)]).sum::<f64>() / nf;
                    let r = inv_std[o * inner + i];
                    for j in 0..n {
                        gx[at(j)] = r * (gd[at(j)] - mg - yd[at(j)] * mgy);
                    }
                }
            }
            vec![Some(Tensor::from_parts(ys.shape().to_vec(), gx))]
        })
    }

    /// Batched matrix product `[..., M, K] x [..., K, N] -> [..., M, N]` with
    /// broadcasting over leading dimensions.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shapes(batch_a, batch_b).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let nb = numel(&batch);
        let map_a = broadcast_index(&batch, batch_a);
        let map_b = broadcast_index(&batch, batch_b);
        let mut out = vec![0.0; nb * m * n];
        let (ad, bd) = (a.data(), b.data());
        let single = batch_b.is_empty() && batch_a == batch.as_slice();
        if single {
            // [..., M, K] x [K, N]: one large product.
            gemm_acc(ad, bd, &mut out, nb * m, k, n);
        } else {
            for i in 0..nb {
                let ab = &ad[map_a[i] * m * k..(map_a[i] + 1) * m * k];
                let bb = &bd[map_b[i] * k * n..(map_b[i] + 1) * k * n];
                gemm_acc(ab, bb, &mut out[i * m * n..(i + 1) * m * n], m, k, n);
            }
        }
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let need_a = self.requires_grad();
        let need_b = other.requires_grad();
        self.tape()
            .record("matmul", Tensor::from_parts(out_shape, out), &[self, other], move |g| {
                let gd = g.data();
                let (ad, bd) = (a.data(), b.data());
                let mut ga = need_a.then(|| vec![0.0; ad.len()]);
                let mut gb = need_b.then(|| vec![0.0; bd.len()]);
                if single {
                    if let Some(ga) = ga.as_mut() {
                        gemm_nt_acc(gd, bd, ga, nb * m, k, n);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gemm_tn_acc(ad, gd, gb, nb * m, k, n);
                    }
                    return vec![
                        ga.map(|v| Tensor::from_parts(sa.clone(), v)),
                        gb.map(|v| Tensor::from_parts(sb.clone(), v)),
                    ];
                }
                for i in 0..nb {
                    let gblk = &gd[i * m * n..(i + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        let bb = &bd[map_b[i] * k * n..(map_b[i] + 1) * k * n];
                        gemm_nt_acc(gblk, bb, &mut ga[map_a[i] * m * k..(map_a[i] + 1) * m * k], m, k, n);
                    }
                    if let Some(gb) = gb.as_mut() {
                        let ab = &ad[map_a[i] * m * k..(map_a[i] + 1) * m * k];
                        gemm_tn_acc(ab, gblk, &mut gb[map_b[i] * k * n..(map_b[i] + 1) * k * n], m, k, n);
                    }
                }
                vec![
                    ga.map(|v| Tensor::from_parts(sa.clone(), v)),
                    gb.map(|v| Tensor::from_parts(sb.clone(), v)),
                ]
            })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.reshape(shape)?;
        let in_shape = x.shape().to_vec();
        self.tape().record("reshape", y, &[self], move |g| {
            vec![Some(g.reshape(&in_shape).expect("reshape grad"))]
        })
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::param("permute", format!("{perm:?} is not a permutation of rank {}", x.rank())));
        }
        let y = permute(&x, perm);
        let inv = inverse_permutation(perm);
        self.tape()
            .record("permute", y, &[self], move |g| vec![Some(permute(g, &inv))])
    }

    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if a >= rank || b >= rank {
            return Err(Error::param("transpose", format!("axes ({a}, {b}) out of range for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Reverses the order of elements along `axis`.
    pub fn flip(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, n, inner) = split_axis("flip", x.shape(), axis)?;
        let y = flip_data(x.data(), outer, n, inner);
        let shape = x.shape().to_vec();
        self.tape()
            .record("flip", Tensor::from_parts(shape.clone(), y), &[self], move |g| {
                vec![Some(Tensor::from_parts(shape.clone(), flip_data(g.data(), outer, n, inner)))]
            })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, n, inner) = split_axis("narrow", x.shape(), axis)?;
        if len == 0 || start + len > n {
            return Err(Error::param("narrow", format!("range {start}..{} exceeds extent {n}", start + len)));
        }
        let xd = x.data();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            y.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let in_shape = x.shape().to_vec();
        self.tape().record("narrow", Tensor::from_parts(shape, y), &[self], move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
        })
    }

    /// Mean squared error against `target` (same shape), as a scalar.
    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        if self.shape() != target.shape() {
            return Err(Error::shape("mse", &self.shape(), &target.shape()));
        }
        let d = self.sub(target)?;
        d.mul(d)?.mean()
    }
}

fn flip_data(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..n {
            let src = (o * n + j) * inner;
            let dst = (o * n + (n - 1 - j)) * inner;
            y[dst..dst + inner].copy_from_slice(&x[src..src + inner]);
        }
    }
    y
}

impl Tape {
    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::param("concat", "no tensors to concatenate"))?;
        let base_shape = first.shape();
        let (outer, _, inner) = split_axis("concat", &base_shape, axis)?;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let mut extents = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base_shape, s));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                out.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base_shape.clone();
        shape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        self.record("concat", Tensor::from_parts(shape, out), parts, move |g| {
            let gd = g.data();
            let mut grads: Vec<Vec<f64>> = extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &e) in grads.iter_mut().zip(&extents) {
                    gp.extend_from_slice(&gd[off..off + e * inner]);
                    off += e * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .map(|(v, s)| Some(Tensor::from_parts(s.clone(), v)))
                .collect()
        })
    }
}
