//! Linear maps, layer norm, single-head attention, feed-forward blocks and
//! embeddings, each a pure function of explicit weight tensors.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x W (+ b)` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.ndim() != 2 {
            return Err(Error::shape("linear", weight.shape(), &[]));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[1]] {
                return Err(Error::shape("linear bias", weight.shape(), b.shape()));
            }
        }
        Ok(Linear { weight, bias })
    }

    /// Normal weights with std `scale`, zero bias when requested.
    pub fn init(rng: &Rng, name: &str, in_dim: usize, out_dim: usize, scale: f64, bias: bool, trainable: bool) -> Result<Self> {
        let w = Tensor::randn(&[in_dim, out_dim], &mut rng.stream(&format!("{name}.w")), scale)?;
        let b = bias.then(|| Tensor::zeros(&[out_dim])).transpose()?;
        Ok(Linear {
            weight: w.with_requires_grad(trainable),
            bias: b.map(|b| b.with_requires_grad(trainable)),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, self)
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![("w", &self.weight)];
        if let Some(b) = &self.bias {
            out.push(("b", b));
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![("w", &mut self.weight)];
        if let Some(b) = &mut self.bias {
            out.push(("b", b));
        }
        out
    }

    pub fn numel(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }
}

pub fn linear(x: &Tensor, w: &Linear) -> Result<Tensor> {
    if x.shape().last() != Some(&w.in_dim()) {
        return Err(Error::shape("linear", x.shape(), w.weight.shape()));
    }
    let y = x.matmul(&w.weight)?;
    match &w.bias {
        Some(b) => y.add(b),
        None => Ok(y),
    }
}

/// `GELU(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn new(up: Linear, down: Linear) -> Result<Self> {
        if up.out_dim() != down.in_dim() || up.in_dim() != down.out_dim() {
            return Err(Error::shape("ffn", up.weight.shape(), down.weight.shape()));
        }
        Ok(Ffn { up, down })
    }

    pub fn init(rng: &Rng, name: &str, dim: usize, hidden: usize, trainable: bool) -> Result<Self> {
        Ffn::new(
            Linear::init(rng, &format!("{name}.w1"), dim, hidden, (dim as f64).powf(-0.5), true, trainable)?,
            Linear::init(rng, &format!("{name}.w2"), hidden, dim, (hidden as f64).powf(-0.5), true, trainable)?,
        )
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ffn(x, self)
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.up.tensors().into_iter().map(|(n, t)| (format!("{n}1"), t)).collect();
        out.extend(self.down.tensors().into_iter().map(|(n, t)| (format!("{n}2"), t)));
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            self.up.tensors_mut().into_iter().map(|(n, t)| (format!("{n}1"), t)).collect();
        out.extend(self.down.tensors_mut().into_iter().map(|(n, t)| (format!("{n}2"), t)));
        out
    }

    pub fn numel(&self) -> usize {
        self.up.numel() + self.down.numel()
    }
}

pub fn ffn(x: &Tensor, w: &Ffn) -> Result<Tensor> {
    linear(&linear(x, &w.up)?.gelu(), &w.down)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: Tensor::new(vec![1.0; dim], &[dim])?,
            beta: Tensor::zeros(&[dim])?,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta, self.eps)
    }
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    x.layer_norm(gamma, beta, eps)
}

/// `softmax(q kᵀ / √d_scale) v` over the last two dimensions. Leading
/// dimensions of `q` may batch over a shared 2-D `k`/`v`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, d_scale: f64) -> Result<Tensor> {
    if !(d_scale > 0.0) {
        return Err(Error::InvalidArgument(format!("attention scale must be positive, got {d_scale}")));
    }
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / d_scale.sqrt());
    let axis = scores.ndim() - 1;
    scores.softmax(axis)?.matmul(v)
}

/// Single-head cross-attention of `q_in` onto `kv_in` with bare projections.
pub fn cross_attention(q_in: &Tensor, kv_in: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, d_scale: f64) -> Result<Tensor> {
    let q = q_in.matmul(wq)?;
    let k = kv_in.matmul(wk)?;
    let v = kv_in.matmul(wv)?;
    if q.shape().last() != k.shape().last() {
        return Err(Error::shape("cross_attention", q.shape(), k.shape()));
    }
    scaled_dot_attention(&q, &k, &v, d_scale)
}

/// Row gather from an embedding table.
pub fn embed(ids: &[usize], table: &Tensor) -> Result<Tensor> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("embed: empty id sequence".into()));
    }
    table.index_select(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error, DEFAULT_STEP};
    use crate::tensor::no_grad;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, &mut Rng::new(seed), 1.0).unwrap()
    }

    #[test]
    fn linear_examples() {
        let x = t(&[0.5, -1.5], &[1, 2]);
        let id = Linear::new(Tensor::eye(2).unwrap(), Some(Tensor::zeros(&[2]).unwrap())).unwrap();
        assert_eq!(id.forward(&x).unwrap().data(), x.data());

        let w = Linear::new(t(&[1.0, 0.0, 0.0, 2.0], &[2, 2]), None).unwrap();
        assert_eq!(w.forward(&t(&[1.0, 1.0], &[1, 2])).unwrap().data(), &[1.0, 2.0]);

        let any = Linear::new(rand(&[2, 3], 1), Some(Tensor::zeros(&[3]).unwrap())).unwrap();
        assert_eq!(any.forward(&Tensor::zeros(&[1, 2]).unwrap()).unwrap().data(), &[0.0; 3]);

        assert!(any.forward(&Tensor::zeros(&[1, 3]).unwrap()).is_err());
    }

    #[test]
    fn attention_single_key_returns_its_value() {
        let q_in = rand(&[3, 2], 1);
        let kv = rand(&[1, 2], 2);
        let (wq, wk, wv) = (rand(&[2, 2], 3), rand(&[2, 2], 4), rand(&[2, 2], 5));
        let out = cross_attention(&q_in, &kv, &wq, &wk, &wv, 2.0).unwrap();
        let value = kv.matmul(&wv).unwrap();
        for r in 0..3 {
            for j in 0..2 {
                assert!((out.data()[r * 2 + j] - value.data()[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let q_in = rand(&[2, 2], 1);
        let kv = t(&[1.0, 2.0, 1.0, 2.0, 1.0, 2.0], &[3, 2]);
        let eye = Tensor::eye(2).unwrap();
        let wv = rand(&[2, 2], 9);
        let out = cross_attention(&q_in, &kv, &eye, &eye, &wv, 2.0).unwrap();
        let v = kv.matmul(&wv).unwrap();
        for j in 0..2 {
            let mean = (v.data()[j] + v.data()[2 + j] + v.data()[4 + j]) / 3.0;
            assert!((out.data()[j] - mean).abs() < 1e-14);
        }
    }

    /// Direct evaluation of softmax((xWq)(yWk)ᵀ/√d)(yWv) with scalar loops.
    fn attention_oracle(q_in: &Tensor, kv: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, d: f64) -> Vec<f64> {
        let proj = |x: &Tensor, w: &Tensor| -> Vec<Vec<f64>> {
            let (n, din) = (x.shape()[0], x.shape()[1]);
            let dout = w.shape()[1];
            (0..n)
                .map(|i| (0..dout).map(|j| (0..din).map(|p| x.data()[i * din + p] * w.data()[p * dout + j]).sum()).collect())
                .collect()
        };
        let (q, k, v) = (proj(q_in, wq), proj(kv, wk), proj(kv, wv));
        let mut out = vec![];
        for qi in &q {
            let logits: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..v[0].len() {
                out.push(e.iter().zip(&v).map(|(w, vj)| w / z * vj[c]).sum());
            }
        }
        out
    }

    #[test]
    fn attention_hand_set_case() {
        let q_in = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let kv = t(&[1.0, 2.0, -1.0, 0.5], &[2, 2]);
        let wq = t(&[1.0, 0.5, 0.0, 1.0], &[2, 2]);
        let wk = t(&[0.5, 0.0, 1.0, -1.0], &[2, 2]);
        let wv = t(&[2.0, 0.0, 1.0, 1.0], &[2, 2]);
        let out = cross_attention(&q_in, &kv, &wq, &wk, &wv, 2.0).unwrap();
        let expected = attention_oracle(&q_in, &kv, &wq, &wk, &wv, 2.0);
        for (a, b) in out.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_oracle_on_random_instances() {
        for seed in 0..25u64 {
            let q_in = rand(&[3, 4], seed * 7);
            let kv = rand(&[5, 3], seed * 7 + 1);
            let (wq, wk, wv) = (rand(&[4, 2], seed * 7 + 2), rand(&[3, 2], seed * 7 + 3), rand(&[3, 3], seed * 7 + 4));
            let out = cross_attention(&q_in, &kv, &wq, &wk, &wv, 2.0).unwrap();
            let expected = attention_oracle(&q_in, &kv, &wq, &wk, &wv, 2.0);
            for (a, b) in out.data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_rejects_bad_scale() {
        let x = rand(&[2, 2], 1);
        let eye = Tensor::eye(2).unwrap();
        assert!(cross_attention(&x, &x, &eye, &eye, &eye, 0.0).is_err());
    }

    #[test]
    fn attention_is_permutation_invariant_in_keys() {
        let q_in = rand(&[2, 3], 1);
        let kv = rand(&[4, 3], 2);
        let (wq, wk, wv) = (rand(&[3, 3], 3), rand(&[3, 3], 4), rand(&[3, 3], 5));
        let permuted = kv.index_select(&[2, 0, 3, 1]).unwrap();
        let a = cross_attention(&q_in, &kv, &wq, &wk, &wv, 3.0).unwrap();
        let b = cross_attention(&q_in, &permuted, &wq, &wk, &wv, 3.0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        // With 3 values in 2-D, barycentric coordinates of each output row
        // w.r.t. the first two value rows plus a normalisation constraint
        // must be non-negative.
        let q_in = rand(&[4, 2], 11);
        let kv = rand(&[3, 2], 12);
        let eye = Tensor::eye(2).unwrap();
        let out = cross_attention(&q_in, &kv, &eye, &eye, &eye, 2.0).unwrap();
        let v = kv.data();
        let (ax, ay, bx, by, cx, cy) = (v[0], v[1], v[2], v[3], v[4], v[5]);
        let det = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy);
        for r in 0..4 {
            let (px, py) = (out.data()[r * 2], out.data()[r * 2 + 1]);
            let l1 = ((by - cy) * (px - cx) + (cx - bx) * (py - cy)) / det;
            let l2 = ((cy - ay) * (px - cx) + (ax - cx) * (py - cy)) / det;
            let l3 = 1.0 - l1 - l2;
            assert!(l1 > -1e-12 && l2 > -1e-12 && l3 > -1e-12, "{l1} {l2} {l3}");
        }
    }

    #[test]
    fn ffn_examples() {
        let zero = Ffn::new(
            Linear::new(Tensor::zeros(&[4, 8]).unwrap(), Some(Tensor::zeros(&[8]).unwrap())).unwrap(),
            Linear::new(Tensor::zeros(&[8, 4]).unwrap(), Some(t(&[1.0, 2.0, 3.0, 4.0], &[4]))).unwrap(),
        )
        .unwrap();
        let out = zero.forward(&rand(&[3, 4], 1)).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);

        let unit = Ffn::new(
            Linear::new(t(&[1.0], &[1, 1]), Some(t(&[0.0], &[1]))).unwrap(),
            Linear::new(t(&[1.0], &[1, 1]), Some(t(&[0.0], &[1]))).unwrap(),
        )
        .unwrap();
        let x = t(&[-1.3, 0.0, 2.2], &[3, 1]);
        let y = unit.forward(&x).unwrap();
        for (xi, yi) in x.data().iter().zip(y.data()) {
            assert_eq!(*yi, 0.5 * xi * (1.0 + libm::erf(xi / std::f64::consts::SQRT_2)));
        }
    }

    #[test]
    fn ffn_matches_scalar_oracle() {
        let w = Ffn::init(&Rng::new(4), "f", 4, 6, false).unwrap();
        let x = rand(&[2, 4], 5);
        let y = w.forward(&x).unwrap();
        let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
        let (w1, b1) = (w.up.weight.data(), w.up.bias.as_ref().unwrap().data());
        let (w2, b2) = (w.down.weight.data(), w.down.bias.as_ref().unwrap().data());
        for r in 0..2 {
            let h: Vec<f64> = (0..6).map(|j| gelu((0..4).map(|p| x.data()[r * 4 + p] * w1[p * 6 + j]).sum::<f64>() + b1[j])).collect();
            for c in 0..4 {
                let expected: f64 = (0..6).map(|j| h[j] * w2[j * 4 + c]).sum::<f64>() + b2[c];
                assert!((y.data()[r * 4 + c] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ln = LayerNorm::identity(3).unwrap();
        let beta = t(&[0.5, -0.5, 2.0], &[3]);
        let constant = layer_norm(&t(&[4.0, 4.0, 4.0], &[1, 3]), &ln.gamma, &beta, LAYER_NORM_EPS).unwrap();
        assert_eq!(constant.data(), beta.data());

        let ln2 = LayerNorm::identity(2).unwrap();
        let y = ln2.forward(&t(&[1.0, -1.0], &[1, 2])).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);

        let z = ln.forward(&rand(&[5, 3], 3)).unwrap();
        for r in 0..5 {
            let mean: f64 = z.data()[r * 3..r * 3 + 3].iter().sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn embed_examples() {
        let table = rand(&[5, 3], 1);
        let e = embed(&[0, 0], &table).unwrap();
        assert_eq!(&e.data()[..3], &e.data()[3..]);
        let ids = [4, 1, 3];
        let e = embed(&ids, &table).unwrap();
        for (r, &id) in ids.iter().enumerate() {
            assert_eq!(&e.data()[r * 3..r * 3 + 3], &table.data()[id * 3..id * 3 + 3]);
        }
        assert!(embed(&[], &table).is_err());
        assert!(embed(&[5], &table).is_err());
    }

    #[test]
    fn blocks_pass_gradient_checks() {
        let kv = rand(&[4, 3], 1);
        let (wk, wv) = (rand(&[3, 2], 2), rand(&[3, 3], 3));
        let probe = rand(&[2, 3], 4);
        let x0 = rand(&[2, 3], 5);
        let wq0 = rand(&[3, 2], 6);
        let f = |x: &Tensor, wq: &Tensor| cross_attention(x, &kv, wq, &wk, &wv, 2.0).unwrap().mul(&probe).unwrap().sum();

        for which in 0..2 {
            let leaf = if which == 0 { &x0 } else { &wq0 };
            let p = leaf.with_requires_grad(true);
            let loss = if which == 0 { f(&p, &wq0) } else { f(&x0, &p) };
            loss.backward().unwrap();
            let numeric = central_difference(
                |v| {
                    let c = Tensor::new(v.to_vec(), leaf.shape()).unwrap();
                    no_grad(|| if which == 0 { f(&c, &wq0) } else { f(&x0, &c) }).item().unwrap()
                },
                leaf.data(),
                DEFAULT_STEP,
            );
            let err = relative_error(&p.grad().unwrap(), &numeric);
            assert!(err < 1e-6, "attention input {which}: {err}");
        }

        let w = Ffn::init(&Rng::new(8), "f", 3, 5, true).unwrap();
        let x = rand(&[2, 3], 9);
        ffn(&x, &w).unwrap().mul(&probe).unwrap().sum().backward().unwrap();
        let analytic = w.up.weight.grad().unwrap();
        let numeric = central_difference(
            |v| {
                let mut c = w.clone();
                c.up.weight = Tensor::new(v.to_vec(), &[3, 5]).unwrap();
                no_grad(|| ffn(&x, &c).unwrap().mul(&probe).unwrap().sum().item().unwrap())
            },
            w.up.weight.data(),
            DEFAULT_STEP,
        );
        assert!(relative_error(&analytic, &numeric) < 1e-6);
    }
}
