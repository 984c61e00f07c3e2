//! Intra- and inter-class cosine similarity statistics.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const HIST_BINS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct CosineReport {
    pub intra_mean: f64,
    pub intra_std: f64,
    pub inter_mean: f64,
    pub inter_std: f64,
    pub gap: f64,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
    /// Counts over `HIST_BINS` equal bins spanning `[-1, 1]`.
    pub intra_hist: Vec<usize>,
    pub inter_hist: Vec<usize>,
}

fn bin(c: f64) -> usize {
    (((c + 1.0) / 2.0 * HIST_BINS as f64).floor() as usize).min(HIST_BINS - 1)
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Cosine of every unordered pair of rows, split by whether the labels agree.
pub fn cosine_stats(features: &[Vec<f64>], labels: &[usize]) -> Result<CosineReport> {
    if features.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} features for {} labels", features.len(), labels.len())));
    }
    if features.len() < 2 {
        return Err(Error::InvalidArgument("cosine statistics need at least 2 samples".into()));
    }
    let norms: Vec<f64> = features.iter().map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::InvalidArgument(format!("feature row {i} has zero norm")));
    }
    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            let dot: f64 = features[i].iter().zip(&features[j]).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            if labels[i] == labels[j] { intra.push(c) } else { inter.push(c) }
        }
    }
    if inter.is_empty() {
        return Err(Error::InvalidArgument("cosine statistics need at least 2 classes".into()));
    }
    if intra.is_empty() {
        return Err(Error::InvalidArgument("no class has two samples".into()));
    }
    let hist = |xs: &[f64]| {
        let mut h = vec![0usize; HIST_BINS];
        xs.iter().for_each(|&c| h[bin(c)] += 1);
        h
    };
    let (intra_mean, intra_std) = moments(&intra);
    let (inter_mean, inter_std) = moments(&inter);
    Ok(CosineReport {
        intra_mean,
        intra_std,
        inter_mean,
        inter_std,
        gap: intra_mean - inter_mean,
        intra_pairs: intra.len(),
        inter_pairs: inter.len(),
        intra_hist: hist(&intra),
        inter_hist: hist(&inter),
    })
}

impl CosineReport {
    pub fn summary(&self) -> String {
        format!(
            "intra_mean {:.6}\nintra_std {:.6}\ninter_mean {:.6}\ninter_std {:.6}\ngap {:.6}\nintra_pairs {}\ninter_pairs {}\n",
            self.intra_mean, self.intra_std, self.inter_mean, self.inter_std, self.gap, self.intra_pairs, self.inter_pairs
        )
    }

    /// `bin_lo,bin_hi,intra,inter` rows.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,intra,inter\n");
        let w = 2.0 / HIST_BINS as f64;
        for b in 0..HIST_BINS {
            let lo = -1.0 + b as f64 * w;
            let _ = writeln!(out, "{lo:.2},{:.2},{},{}", lo + w, self.intra_hist[b], self.inter_hist[b]);
        }
        out
    }
}
