//! Two-component PCA by power iteration with deflation.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const TOLERANCE: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    pub coords: Vec<[f64; 2]>,
    /// Fraction of total variance carried by each component.
    pub explained: [f64; 2],
    pub components: [Vec<f64>; 2],
}

fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    m.chunks(d).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let pivot = v.iter().enumerate().fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Dominant eigenpair of a symmetric PSD matrix, or `None` when it is
/// numerically zero.
fn dominant(cov: &[f64], d: usize, scale: f64, rng: &mut Rng) -> Option<(f64, Vec<f64>)> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    normalize(&mut v);
    for _ in 0..MAX_ITERATIONS {
        let mut next = matvec(cov, &v);
        if normalize(&mut next) <= 1e-14 * scale {
            return None;
        }
        fix_sign(&mut next);
        let change = next.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = next;
        if change < TOLERANCE {
            break;
        }
    }
    let lambda = v.iter().zip(matvec(cov, &v)).map(|(a, b)| a * b).sum::<f64>();
    Some((lambda, v))
}

pub fn pca2(features: &[Vec<f64>]) -> Result<Pca2> {
    let n = features.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("pca needs at least 3 points, got {n}")));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::InvalidArgument("pca rows must share a non-zero width".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = features.iter().map(|f| f.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let mut cov = vec![0.0; d * d];
    for x in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += x[i] * x[j] / (n - 1) as f64;
            }
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if trace <= 0.0 {
        return Err(Error::InvalidArgument("pca input has zero variance".into()));
    }
    let mut rng = Rng::new(0).stream("pca");
    let (l1, v1) = dominant(&cov, d, trace, &mut rng).expect("non-zero trace has a dominant direction");
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (l2, v2) = match dominant(&cov, d, trace, &mut rng) {
        Some((l, v)) if l > 1e-12 * trace => (l, v),
        _ => {
            // Rank one: any unit vector orthogonal to the first component.
            let axis = (0..d).min_by(|&a, &b| v1[a].abs().total_cmp(&v1[b].abs())).unwrap();
            let mut v: Vec<f64> = (0..d).map(|i| if i == axis { 1.0 } else { 0.0 } - v1[axis] * v1[i]).collect();
            if normalize(&mut v) == 0.0 {
                v = vec![0.0; d];
            }
            fix_sign(&mut v);
            (0.0, v)
        }
    };
    let project = |x: &[f64], v: &[f64]| x.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    Ok(Pca2 {
        coords: centered.iter().map(|x| [project(x, &v1), project(x, &v2)]).collect(),
        explained: [l1 / trace, l2.max(0.0) / trace],
        components: [v1, v2],
    })
}

impl Pca2 {
    /// `index,label,pc1,pc2` rows.
    pub fn to_csv(&self, labels: &[usize]) -> String {
        let mut out = String::from("index,label,pc1,pc2\n");
        for (i, ([a, b], l)) in self.coords.iter().zip(labels).enumerate() {
            let _ = writeln!(out, "{i},{l},{a:.6},{b:.6}");
        }
        out
    }
}
