//! Orthogonal cross-attention adapters.
//!
//! For hook layer `k+1` of one tower, the previous layer's tokens are
//! down-projected to rank `r`, attend over the rank-`r` projection of the
//! query summary, and are up-projected back. The increment is then made
//! orthogonal, row by row, to the pre-trained feature it is added to.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct OcaWeights {
    /// `W_d`: feature_dim → rank.
    pub down: Tensor,
    /// `W_p`: query_dim → rank.
    pub summary: Tensor,
    /// `W_u`: rank → feature_dim, zero at initialization.
    pub up: Tensor,
}

impl OcaWeights {
    pub fn init(rng: &Rng, name: &str, feature_dim: usize, query_dim: usize, rank: usize) -> Result<Self> {
        Ok(OcaWeights {
            down: Tensor::randn(&[feature_dim, rank], &mut rng.stream(&format!("{name}.wd")), ADAPTER_INIT_STD)?
                .with_requires_grad(true),
            summary: Tensor::randn(&[query_dim, rank], &mut rng.stream(&format!("{name}.wp")), ADAPTER_INIT_STD)?
                .with_requires_grad(true),
            up: Tensor::zeros(&[rank, feature_dim])?.with_requires_grad(true),
        })
    }

    pub fn for_image(config: &ModelConfig, rng: &Rng, layer: usize) -> Result<Self> {
        Self::init(rng, &format!("oca.v.layer{layer}"), config.image_dim, config.query_dim, config.rank)
    }

    pub fn for_text(config: &ModelConfig, rng: &Rng, layer: usize) -> Result<Self> {
        Self::init(rng, &format!("oca.t.layer{layer}"), config.text_dim, config.query_dim, config.rank)
    }

    pub fn rank(&self) -> usize {
        self.down.shape()[1]
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("wd", &self.down), ("wp", &self.summary), ("wu", &self.up)]
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("wd", &mut self.down), ("wp", &mut self.summary), ("wu", &mut self.up)]
    }
}

/// `Δf = Attn(f W_d, z W_p) W_u` with projection-free attention scaled by
/// `√rank`. `features` may be `[tokens, d]` or batched `[classes, tokens, d]`.
pub fn oca_delta(features: &Tensor, summary: &Tensor, w: &OcaWeights) -> Result<Tensor> {
    if features.shape().last() != Some(&w.down.shape()[0]) {
        return Err(Error::shape("oca down-projection", features.shape(), w.down.shape()));
    }
    if summary.ndim() != 2 || summary.shape()[1] != w.summary.shape()[0] {
        return Err(Error::shape("oca summary projection", summary.shape(), w.summary.shape()));
    }
    let queries = features.matmul(&w.down)?;
    let keys = summary.matmul(&w.summary)?;
    let fused = nn::scaled_dot_attention(&queries, &keys, &keys, w.rank() as f64)?;
    fused.matmul(&w.up)
}

/// Per-row `Δ − (⟨Δ, f⟩ / (⟨f, f⟩ + ε)) f`.
pub fn orthogonalize(delta: &Tensor, base: &Tensor, eps: f64) -> Result<Tensor> {
    if delta.shape() != base.shape() {
        return Err(Error::shape("orthogonalize", delta.shape(), base.shape()));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("orthogonalize: eps must be non-negative, got {eps}")));
    }
    let axis = delta.ndim() - 1;
    let dot = delta.mul(base)?.sum_axis(axis)?;
    let norm_sq = base.mul(base)?.sum_axis(axis)?.add_scalar(eps);
    delta.sub(&dot.div(&norm_sq)?.mul(base)?)
}

/// Residual sum of the pre-trained feature and the adapter increment.
pub fn oca_apply(base: &Tensor, delta: &Tensor) -> Result<Tensor> {
    if base.shape() != delta.shape() {
        return Err(Error::shape("oca_apply", base.shape(), delta.shape()));
    }
    base.add(delta)
}

/// Largest `|cos(Δ_row, f_row)|` over rows with `‖f_row‖ > min_norm`; rows
/// where the increment vanishes count as zero.
pub fn max_abs_row_cosine(delta: &Tensor, base: &Tensor, min_norm: f64) -> f64 {
    let d = *base.shape().last().expect("tensor has dims");
    delta
        .data()
        .chunks(d)
        .zip(base.data().chunks(d))
        .filter_map(|(x, f)| {
            let nf = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nf <= min_norm {
                return None;
            }
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = x.iter().zip(f).map(|(a, b)| a * b).sum();
            Some(dot.abs() / (nx * nf + 1e-30))
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error, DEFAULT_STEP};
    use crate::tensor::no_grad;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    fn random_weights(seed: u64, d: usize, dq: usize, r: usize) -> OcaWeights {
        let mut rng = Rng::new(seed);
        OcaWeights {
            down: Tensor::randn(&[d, r], &mut rng, 0.7).unwrap(),
            summary: Tensor::randn(&[dq, r], &mut rng, 0.7).unwrap(),
            up: Tensor::randn(&[r, d], &mut rng, 0.7).unwrap(),
        }
    }

    /// Scalar-loop evaluation of W_u · Attn(W_d f, W_p z) for one token row.
    fn delta_oracle(f: &[f64], z: &Tensor, w: &OcaWeights) -> Vec<f64> {
        let (d, r) = (w.down.shape()[0], w.down.shape()[1]);
        let dq = w.summary.shape()[0];
        let q: Vec<f64> = (0..r).map(|j| (0..d).map(|p| f[p] * w.down.data()[p * r + j]).sum()).collect();
        let keys: Vec<Vec<f64>> = z
            .data()
            .chunks(dq)
            .map(|zr| (0..r).map(|j| (0..dq).map(|p| zr[p] * w.summary.data()[p * r + j]).sum()).collect())
            .collect();
        let logits: Vec<f64> = keys.iter().map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (r as f64).sqrt()).collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let zsum: f64 = e.iter().sum();
        let fused: Vec<f64> = (0..r).map(|j| e.iter().zip(&keys).map(|(w, k)| w / zsum * k[j]).sum()).collect();
        (0..d).map(|c| (0..r).map(|j| fused[j] * w.up.data()[j * d + c]).sum()).collect()
    }

    fn ortho_oracle(x: &[f64], f: &[f64], eps: f64) -> Vec<f64> {
        let dot: f64 = x.iter().zip(f).map(|(a, b)| a * b).sum();
        let nn: f64 = f.iter().map(|v| v * v).sum();
        x.iter().zip(f).map(|(a, b)| a - dot / (nn + eps) * b).collect()
    }

    #[test]
    fn zero_up_projection_gives_zero_delta() {
        let w = OcaWeights::init(&Rng::new(1), "x", 5, 3, 2).unwrap();
        let f = Tensor::randn(&[4, 5], &mut Rng::new(2), 1.0).unwrap();
        let z = Tensor::randn(&[3, 3], &mut Rng::new(3), 1.0).unwrap();
        let d = oca_delta(&f, &z, &w).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_summary_row_repeats() {
        let w = random_weights(4, 5, 3, 2);
        let f = Tensor::randn(&[4, 5], &mut Rng::new(5), 1.0).unwrap();
        let z = Tensor::randn(&[1, 3], &mut Rng::new(6), 1.0).unwrap();
        let d = oca_delta(&f, &z, &w).unwrap();
        let expected = z.matmul(&w.summary).unwrap().matmul(&w.up).unwrap();
        for row in d.data().chunks(5) {
            for (a, b) in row.iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rank_two_matches_formula() {
        for seed in 0..25 {
            let w = random_weights(seed, 6, 4, 2);
            let f = Tensor::randn(&[3, 6], &mut Rng::new(seed + 100), 1.0).unwrap();
            let z = Tensor::randn(&[2, 4], &mut Rng::new(seed + 200), 1.0).unwrap();
            let d = oca_delta(&f, &z, &w).unwrap();
            for (r, row) in f.data().chunks(6).enumerate() {
                let expected = delta_oracle(row, &z, &w);
                for (a, b) in d.data()[r * 6..(r + 1) * 6].iter().zip(&expected) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn batched_text_features() {
        let w = random_weights(7, 6, 4, 2);
        let f = Tensor::randn(&[2, 3, 6], &mut Rng::new(8), 1.0).unwrap();
        let z = Tensor::randn(&[2, 4], &mut Rng::new(9), 1.0).unwrap();
        let d = oca_delta(&f, &z, &w).unwrap();
        assert_eq!(d.shape(), &[2, 3, 6]);
        for (r, row) in f.data().chunks(6).enumerate() {
            let expected = delta_oracle(row, &z, &w);
            for (a, b) in d.data()[r * 6..(r + 1) * 6].iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orthogonalize_examples() {
        let f = t(&[1.0, -2.0, 0.5], &[1, 3]);
        let parallel = orthogonalize(&f.scale(2.0), &f, 0.0).unwrap();
        assert!(parallel.data().iter().all(|v| v.abs() < 1e-15));

        let ortho = t(&[2.0, 1.0, 0.0], &[1, 3]);
        assert_eq!(orthogonalize(&ortho, &f, 0.0).unwrap().data(), ortho.data());

        let y = orthogonalize(&t(&[1.0, 1.0], &[1, 2]), &t(&[1.0, 0.0], &[1, 2]), 0.0).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0]);

        assert!(orthogonalize(&t(&[1.0; 3], &[1, 3]), &t(&[1.0; 2], &[1, 2]), 0.0).is_err());
    }

    #[test]
    fn zero_rows_stay_finite_with_eps() {
        let y = orthogonalize(&t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]), &t(&[0.0, 0.0, 1.0, 0.0], &[2, 2]), 1e-8).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert_eq!(&y.data()[..2], &[1.0, 2.0]);
    }

    #[test]
    fn orthogonalize_matches_oracle_on_random_instances() {
        for seed in 0..25 {
            let mut rng = Rng::new(seed);
            let x = Tensor::randn(&[2, 3, 5], &mut rng, 1.0).unwrap();
            let f = Tensor::randn(&[2, 3, 5], &mut rng, 1.0).unwrap();
            for eps in [0.0, 1e-8] {
                let y = orthogonalize(&x, &f, eps).unwrap();
                for ((yr, xr), fr) in y.data().chunks(5).zip(x.data().chunks(5)).zip(f.data().chunks(5)) {
                    for (a, b) in yr.iter().zip(ortho_oracle(xr, fr, eps)) {
                        assert!((a - b).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn oca_apply_examples() {
        let f = Tensor::randn(&[3, 4], &mut Rng::new(1), 1.0).unwrap();
        let zero = Tensor::zeros(&[3, 4]).unwrap();
        assert_eq!(oca_apply(&f, &zero).unwrap().data(), f.data());

        let a = Tensor::randn(&[3, 4], &mut Rng::new(2), 1.0).unwrap();
        let b = Tensor::randn(&[3, 4], &mut Rng::new(3), 1.0).unwrap();
        let lhs = oca_apply(&f, &a).unwrap().add(&oca_apply(&zero, &b).unwrap()).unwrap();
        let rhs = oca_apply(&f, &a.add(&b).unwrap()).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        let sum = oca_apply(&f, &a).unwrap();
        for ((s, x), y) in sum.data().iter().zip(f.data()).zip(a.data()) {
            assert_eq!(*s, x + y);
        }
        assert!(oca_apply(&f, &Tensor::zeros(&[4, 3]).unwrap()).is_err());
    }

    #[test]
    fn gradients_flow_through_the_projection() {
        let w = random_weights(11, 5, 3, 2);
        let f = Tensor::randn(&[4, 5], &mut Rng::new(12), 1.0).unwrap();
        let base = Tensor::randn(&[4, 5], &mut Rng::new(13), 1.0).unwrap();
        let z = Tensor::randn(&[3, 3], &mut Rng::new(14), 1.0).unwrap();
        let probe = Tensor::randn(&[4, 5], &mut Rng::new(15), 1.0).unwrap();
        let loss_of = |w: &OcaWeights| {
            let delta = oca_delta(&f, &z, w).unwrap();
            orthogonalize(&delta, &base, 1e-8).unwrap().mul(&probe).unwrap().sum()
        };
        for which in 0..3 {
            let mut trainable = w.clone();
            {
                let slot = match which {
                    0 => &mut trainable.down,
                    1 => &mut trainable.summary,
                    _ => &mut trainable.up,
                };
                *slot = slot.with_requires_grad(true);
            }
            loss_of(&trainable).backward().unwrap();
            let (analytic, shape, values) = match which {
                0 => (trainable.down.grad().unwrap(), w.down.shape().to_vec(), w.down.to_vec()),
                1 => (trainable.summary.grad().unwrap(), w.summary.shape().to_vec(), w.summary.to_vec()),
                _ => (trainable.up.grad().unwrap(), w.up.shape().to_vec(), w.up.to_vec()),
            };
            let numeric = central_difference(
                |v| {
                    let mut c = w.clone();
                    let x = Tensor::new(v.to_vec(), &shape).unwrap();
                    match which {
                        0 => c.down = x,
                        1 => c.summary = x,
                        _ => c.up = x,
                    }
                    no_grad(|| loss_of(&c).item().unwrap())
                },
                &values,
                DEFAULT_STEP,
            );
            let err = relative_error(&analytic, &numeric);
            assert!(err < 1e-6, "param {which}: {err}");
        }
    }

    proptest! {
        #[test]
        fn projection_properties(seed in 0u64..10_000, d in 2usize..9, rows in 1usize..5) {
            let mut rng = Rng::new(seed);
            let x = Tensor::randn(&[rows, d], &mut rng, 1.0).unwrap();
            let f = Tensor::randn(&[rows, d], &mut rng, 1.0).unwrap();
            let y = orthogonalize(&x, &f, 0.0).unwrap();
            let y_eps = orthogonalize(&x, &f, 1e-8).unwrap();
            // Residual inner products, relative to the input scale; the
            // eps-regularized form leaves exactly ⟨x,f⟩·ε/(‖f‖²+ε).
            for ((yr, ye), (xr, fr)) in y.data().chunks(d).zip(y_eps.data().chunks(d))
                .zip(x.data().chunks(d).zip(f.data().chunks(d)))
            {
                let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
                let scale = (dot(xr, xr) * dot(fr, fr)).sqrt();
                prop_assert!(dot(yr, fr).abs() <= 1e-12 * scale);
                let expected = dot(xr, fr) * 1e-8 / (dot(fr, fr) + 1e-8);
                prop_assert!((dot(ye, fr) - expected).abs() <= 1e-12 * scale);
            }

            for (yr, xr) in y.data().chunks(d).zip(x.data().chunks(d)) {
                let ny: f64 = yr.iter().map(|v| v * v).sum();
                let nx: f64 = xr.iter().map(|v| v * v).sum();
                prop_assert!(ny <= nx * (1.0 + 1e-12));
            }

            let twice = orthogonalize(&y, &f, 0.0).unwrap();
            for (a, b) in twice.data().iter().zip(y.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
