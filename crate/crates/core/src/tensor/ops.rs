use super::kernels::{axis_extents, broadcast_shape, gemm_nn, gemm_nt, gemm_tn, BroadcastPlan};
use super::Tensor;
use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) enum Op {
    MatMul { batch: usize, m: usize, k: usize, n: usize, a_batched: bool, b_batched: bool },
    Transpose,
    Add(BroadcastPlan),
    Sub(BroadcastPlan),
    Mul(BroadcastPlan),
    Div(BroadcastPlan),
    Scale(f64),
    AddScalar,
    Sqrt,
    Gelu,
    Softmax { axis: usize },
    LayerNorm { dim: usize, normalized: Vec<f64>, rstd: Vec<f64> },
    Sum,
    SumAxis { axis: usize },
    Reshape,
    IndexSelect { ids: Vec<usize> },
    CatRows,
    CrossEntropy { targets: Vec<usize>, probs: Vec<f64> },
}

fn reduce_to(plan: &BroadcastPlan, len: usize, mut term: impl FnMut(usize, usize, usize) -> f64, which_a: bool) -> Vec<f64> {
    let mut out = vec![0.0; len];
    plan.for_each(|o, ia, ib| {
        let idx = if which_a { ia } else { ib };
        out[idx] += term(o, ia, ib);
    });
    out
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

impl Op {
    /// Gradients for each input given the output tensor and its gradient.
    /// `None` for inputs that do not require gradients.
    pub(crate) fn backward(&self, out: &Tensor, inputs: &[Tensor], g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let need = |i: usize| inputs[i].requires_grad();
        match self {
            Op::MatMul { batch, m, k, n, a_batched, b_batched } => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let (m, k, n) = (*m, *k, *n);
                let mut da = need(0).then(|| vec![0.0; a.len()]);
                let mut db = need(1).then(|| vec![0.0; b.len()]);
                for bi in 0..*batch {
                    let ao = if *a_batched { bi * m * k } else { 0 };
                    let bo = if *b_batched { bi * k * n } else { 0 };
                    let go = &g[bi * m * n..(bi + 1) * m * n];
                    if let Some(da) = da.as_mut() {
                        gemm_nt(go, &b[bo..bo + k * n], &mut da[ao..ao + m * k], m, n, k);
                    }
                    if let Some(db) = db.as_mut() {
                        gemm_tn(&a[ao..ao + m * k], go, &mut db[bo..bo + k * n], m, k, n);
                    }
                }
                vec![da, db]
            }
            Op::Transpose => vec![need(0).then(|| transpose_last(g, out.shape()))],
            Op::Add(plan) => {
                let (la, lb) = (inputs[0].numel(), inputs[1].numel());
                vec![
                    need(0).then(|| reduce_to(plan, la, |o, _, _| g[o], true)),
                    need(1).then(|| reduce_to(plan, lb, |o, _, _| g[o], false)),
                ]
            }
            Op::Sub(plan) => {
                let (la, lb) = (inputs[0].numel(), inputs[1].numel());
                vec![
                    need(0).then(|| reduce_to(plan, la, |o, _, _| g[o], true)),
                    need(1).then(|| reduce_to(plan, lb, |o, _, _| -g[o], false)),
                ]
            }
            Op::Mul(plan) => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    need(0).then(|| reduce_to(plan, a.len(), |o, _, ib| g[o] * b[ib], true)),
                    need(1).then(|| reduce_to(plan, b.len(), |o, ia, _| g[o] * a[ia], false)),
                ]
            }
            Op::Div(plan) => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    need(0).then(|| reduce_to(plan, a.len(), |o, _, ib| g[o] / b[ib], true)),
                    need(1).then(|| {
                        reduce_to(plan, b.len(), |o, ia, ib| -g[o] * a[ia] / (b[ib] * b[ib]), false)
                    }),
                ]
            }
            Op::Scale(s) => vec![need(0).then(|| g.iter().map(|v| v * s).collect())],
            Op::AddScalar => vec![need(0).then(|| g.to_vec())],
            Op::Sqrt => {
                let y = out.data();
                vec![need(0).then(|| g.iter().zip(y).map(|(g, y)| g / (2.0 * y)).collect())]
            }
            Op::Gelu => {
                let x = inputs[0].data();
                vec![need(0).then(|| g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect())]
            }
            Op::Softmax { axis } => {
                let y = out.data();
                let (outer, len, inner) = axis_extents(out.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![need(0).then_some(dx)]
            }
            Op::LayerNorm { dim, normalized, rstd } => {
                let d = *dim;
                let gamma = inputs[1].data();
                let rows = normalized.len() / d;
                let dx = need(0).then(|| {
                    let mut dx = vec![0.0; normalized.len()];
                    for r in 0..rows {
                        let xh = &normalized[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dxh: Vec<f64> = gr.iter().zip(gamma).map(|(g, w)| g * w).collect();
                        let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dxh_xh = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    dx
                });
                let dgamma = need(1).then(|| {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * normalized[r * d + j];
                        }
                    }
                    dg
                });
                let dbeta = need(2).then(|| {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    db
                });
                vec![dx, dgamma, dbeta]
            }
            Op::Sum => vec![need(0).then(|| vec![g[0]; inputs[0].numel()])],
            Op::SumAxis { axis } => {
                let (outer, len, inner) = axis_extents(inputs[0].shape(), *axis);
                vec![need(0).then(|| {
                    let mut dx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                dx[o * len * inner + j * inner + i] = g[o * inner + i];
                            }
                        }
                    }
                    dx
                })]
            }
            Op::Reshape => vec![need(0).then(|| g.to_vec())],
            Op::IndexSelect { ids } => {
                let src = &inputs[0];
                let row: usize = src.shape()[1..].iter().product();
                vec![need(0).then(|| {
                    let mut dx = vec![0.0; src.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..row {
                            dx[id * row + j] += g[r * row + j];
                        }
                    }
                    dx
                })]
            }
            Op::CatRows => {
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|t| {
                        let n = t.numel();
                        let slice = t.requires_grad().then(|| g[offset..offset + n].to_vec());
                        offset += n;
                        slice
                    })
                    .collect()
            }
            Op::CrossEntropy { targets, probs } => {
                let batch = targets.len();
                let classes = probs.len() / batch;
                vec![need(0).then(|| {
                    let mut dx = probs.clone();
                    for (b, &t) in targets.iter().enumerate() {
                        dx[b * classes + t] -= 1.0;
                    }
                    dx.iter().map(|v| v * g[0] / batch as f64).collect()
                })]
            }
        }
    }
}

fn transpose_last(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let (r, c) = (shape[nd - 2], shape[nd - 1]);
    let batch = data.len() / (r * c);
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let base = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = data[base + i * c + j];
            }
        }
    }
    out
}

impl Tensor {
    /// Matrix product over the last two dimensions. Leading (batch)
    /// dimensions must match, or one side may be a plain matrix that is
    /// broadcast across the other's batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let batch_shape = match (ba.is_empty(), bb.is_empty()) {
            (_, true) => ba.to_vec(),
            (true, false) => bb.to_vec(),
            (false, false) if ba == bb => ba.to_vec(),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        let batch: usize = batch_shape.iter().product();
        let (a_batched, b_batched) = (!ba.is_empty(), !bb.is_empty());
        let (a, b) = (self.data(), other.data());
        let mut c = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ao = if a_batched { bi * m * k } else { 0 };
            let bo = if b_batched { bi * k * n } else { 0 };
            gemm_nn(&a[ao..ao + m * k], &b[bo..bo + k * n], &mut c[bi * m * n..(bi + 1) * m * n], m, k, n);
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        Ok(Tensor::from_op(
            c,
            shape,
            Op::MatMul { batch, m, k, n, a_batched, b_batched },
            vec![self.clone(), other.clone()],
        ))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let mut shape = s.to_vec();
        let nd = shape.len();
        shape.swap(nd - 1, nd - 2);
        Ok(Tensor::from_op(transpose_last(self.data(), s), shape, Op::Transpose, vec![self.clone()]))
    }

    fn binary(&self, other: &Tensor, name: &'static str, f: impl Fn(f64, f64) -> f64, op: fn(BroadcastPlan) -> Op) -> Result<Tensor> {
        let out_shape =
            broadcast_shape(self.shape(), other.shape()).ok_or_else(|| Error::shape(name, self.shape(), other.shape()))?;
        let plan = BroadcastPlan::new(self.shape(), other.shape(), &out_shape);
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; numel];
        let (a, b) = (self.data(), other.data());
        plan.for_each(|o, ia, ib| out[o] = f(a[ia], b[ib]));
        Ok(Tensor::from_op(out, out_shape, op(plan), vec![self.clone(), other.clone()]))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * s).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Scale(s), vec![self.clone()])
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let out = self.data().iter().map(|v| v + s).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::AddScalar, vec![self.clone()])
    }

    pub fn sqrt(&self) -> Tensor {
        let out = self.data().iter().map(|v| v.sqrt()).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Sqrt, vec![self.clone()])
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&self) -> Tensor {
        let out = self.data().iter().map(|&v| gelu_scalar(v)).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Gelu, vec![self.clone()])
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.ndim() {
            return Err(Error::InvalidArgument(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        Ok(())
    }

    /// Softmax along `axis`, shifted by the slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "softmax")?;
        let x = self.data();
        let (outer, len, inner) = axis_extents(self.shape(), axis);
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] /= total;
                }
            }
        }
        Ok(Tensor::from_op(y, self.shape().to_vec(), Op::Softmax { axis }, vec![self.clone()]))
    }

    /// Layer normalization over the last dimension followed by `γ ⊙ x̂ + β`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| Error::shape("layer_norm", self.shape(), gamma.shape()))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape("layer_norm", self.shape(), gamma.shape()));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("layer_norm: eps must be positive, got {eps}")));
        }
        let x = self.data();
        let rows = x.len() / d;
        let mut normalized = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        let (gw, bw) = (gamma.data(), beta.data());
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let xh = (row[j] - mean) * s;
                normalized[r * d + j] = xh;
                out[r * d + j] = gw[j] * xh + bw[j];
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm { dim: d, normalized, rstd },
            vec![self.clone(), gamma.clone(), beta.clone()],
        ))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        Tensor::from_op(vec![total], vec![1], Op::Sum, vec![self.clone()])
    }

    /// Sum along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis, "sum_axis")?;
        let x = self.data();
        let (outer, len, inner) = axis_extents(self.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x[o * len * inner + j * inner + i];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        Ok(Tensor::from_op(out, shape, Op::SumAxis { axis }, vec![self.clone()]))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let n = self.shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape, vec![self.clone()]))
    }

    /// Gathers rows (first-axis slices) by index.
    pub fn index_select(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("index_select: empty index list".into()));
        }
        let rows = self.shape()[0];
        let row: usize = self.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(ids.len() * row);
        for &id in ids {
            if id >= rows {
                return Err(Error::TokenOutOfRange { id, vocab: rows });
            }
            out.extend_from_slice(&self.data()[id * row..(id + 1) * row]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = ids.len();
        Ok(Tensor::from_op(out, shape, Op::IndexSelect { ids: ids.to_vec() }, vec![self.clone()]))
    }

    /// Concatenates along the first axis.
    pub fn cat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("cat_rows: nothing to concatenate".into()))?;
        let tail = &first.shape()[1..];
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            if p.ndim() == 0 || &p.shape()[1..] != tail {
                return Err(Error::shape("cat_rows", first.shape(), p.shape()));
            }
            rows += p.shape()[0];
            out.extend_from_slice(p.data());
        }
        let mut shape = first.shape().to_vec();
        shape[0] = rows;
        Ok(Tensor::from_op(out, shape, Op::CatRows, parts.to_vec()))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits against
    /// integer targets.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("cross_entropy", s, &[targets.len()]));
        }
        let classes = s[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::InvalidArgument(format!("target {t} out of range for {classes} classes")));
        }
        let x = self.data();
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for (b, &t) in targets.iter().enumerate() {
            let row = &x[b * classes..(b + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            for j in 0..classes {
                probs[b * classes + j] = (row[j] - log_z).exp();
            }
            loss += log_z - row[t];
        }
        loss /= targets.len() as f64;
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            Op::CrossEntropy { targets: targets.to_vec(), probs },
            vec![self.clone()],
        ))
    }

    /// Euclidean inner product over all elements.
    pub fn inner(&self, other: &Tensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::shape("inner", self.shape(), other.shape()));
        }
        Ok(self.data().iter().zip(other.data()).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data().iter().map(|v| v * v).sum()
    }
}
