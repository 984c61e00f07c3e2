//! Synthetic patch-grid classification data and the `NRLD1` file format.
//!
//! Each class owns a prototype patch vector. A sample copies the prototype,
//! plus Gaussian noise, into a random subset of its patches; the remaining
//! patches are pure noise. Values are rounded to `f32` at generation so the
//! on-disk form round-trips exactly.
//!
//! Layout (little-endian): `b"NRLD1"`, version byte, spec echo, then for
//! each of train/val/test a `u32` sample count followed by per-sample
//! `u32` label and `num_patches · patch_dim` `f32` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"NRLD1";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub num_patches: usize,
    pub patch_dim: usize,
    pub signal_patch_fraction: f64,
    pub noise_std: f64,
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 2,
            train_samples: 512,
            val_samples: 128,
            test_samples: 128,
            num_patches: 16,
            patch_dim: 12,
            signal_patch_fraction: 0.25,
            noise_std: 0.5,
            class_separation: 3.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Default proportions with patch geometry taken from a model config.
    pub fn for_model(config: &ModelConfig) -> Self {
        DatasetSpec {
            num_classes: config.num_classes,
            num_patches: config.num_patches,
            patch_dim: config.patch_dim,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_patches == 0 || self.patch_dim == 0 {
            return Err(Error::Config("dataset classes, patches and patch_dim must be at least 1".into()));
        }
        if !(self.signal_patch_fraction > 0.0 && self.signal_patch_fraction <= 1.0) {
            return Err(Error::Config(format!("signal_patch_fraction {} outside (0, 1]", self.signal_patch_fraction)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be non-negative, got {}", self.noise_std)));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::Config(format!("class_separation must be positive, got {}", self.class_separation)));
        }
        for n in [self.train_samples, self.val_samples, self.test_samples] {
            if n > u32::MAX as usize {
                return Err(Error::Config("split too large for the file format".into()));
            }
        }
        Ok(())
    }

    pub fn signal_patches(&self) -> usize {
        ((self.signal_patch_fraction * self.num_patches as f64).round() as usize).clamp(1, self.num_patches)
    }

    pub fn sample_len(&self) -> usize {
        self.num_patches * self.patch_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Row-major `num_patches × patch_dim`, every value exactly an `f32`.
    pub image: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Prototypes with pairwise Euclidean distance at least `class_separation`.
/// Uses scaled orthonormal directions when `num_classes ≤ patch_dim`, and
/// rejection sampling otherwise.
pub fn prototypes(spec: &DatasetSpec) -> Result<Vec<Vec<f64>>> {
    let (c, d) = (spec.num_classes, spec.patch_dim);
    let mut rng = Rng::new(spec.seed).stream("data.prototypes");
    // Small margin so f32 rounding cannot pull a pair below the separation.
    let target = spec.class_separation * (1.0 + 1e-5);
    if c <= d {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(c);
        while basis.len() < c {
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let scale = target / std::f64::consts::SQRT_2;
        return Ok(basis.into_iter().map(|b| b.into_iter().map(|x| round_f32(x * scale)).collect()).collect());
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut attempts = 0usize;
    while out.len() < c {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Config(format!(
                "could not place {c} prototypes {} apart in {d} dimensions",
                spec.class_separation
            )));
        }
        let v: Vec<f64> = (0..d).map(|_| round_f32(rng.normal() * target)).collect();
        if out.iter().all(|p| dist(p, &v) >= target) {
            out.push(v);
        }
    }
    Ok(out)
}

fn generate_split(spec: &DatasetSpec, protos: &[Vec<f64>], split: SplitName, n: usize) -> Vec<Sample> {
    let mut rng = Rng::new(spec.seed).stream(&format!("data.{}", split.as_str()));
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    rng.shuffle(&mut labels);
    let signal = spec.signal_patches();
    let mut patch_order: Vec<usize> = (0..spec.num_patches).collect();
    labels
        .into_iter()
        .map(|label| {
            rng.shuffle(&mut patch_order);
            let mut is_signal = vec![false; spec.num_patches];
            patch_order[..signal].iter().for_each(|&p| is_signal[p] = true);
            let mut image = Vec::with_capacity(spec.sample_len());
            for &sig in &is_signal {
                for &proto in &protos[label] {
                    let base = if sig { proto } else { 0.0 };
                    image.push(round_f32(base + spec.noise_std * rng.normal()));
                }
            }
            Sample { image, label }
        })
        .collect()
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let protos = prototypes(spec)?;
    Ok(Dataset {
        train: generate_split(spec, &protos, SplitName::Train, spec.train_samples),
        val: generate_split(spec, &protos, SplitName::Val, spec.val_samples),
        test: generate_split(spec, &protos, SplitName::Test, spec.test_samples),
        spec: spec.clone(),
    })
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &[Sample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn image(&self, sample: &Sample) -> Result<Tensor> {
        Tensor::new(sample.image.clone(), &[self.spec.num_patches, self.spec.patch_dim])
    }

    /// Rejects datasets whose geometry or class count disagrees with the model.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        let pairs = [
            ("num_patches", self.spec.num_patches, config.num_patches),
            ("patch_dim", self.spec.patch_dim, config.patch_dim),
            ("num_classes", self.spec.num_classes, config.num_classes),
        ];
        for (name, data, model) in pairs {
            if data != model {
                return Err(Error::DimMismatch(format!("dataset {name} = {data} but model expects {model}")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.spec;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for v in [s.num_classes, s.train_samples, s.val_samples, s.test_samples, s.num_patches, s.patch_dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in [s.signal_patch_fraction, s.noise_std, s.class_separation] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&s.seed.to_le_bytes());
        for split in [&self.train, &self.val, &self.test] {
            out.extend_from_slice(&(split.len() as u32).to_le_bytes());
            for sample in split {
                out.extend_from_slice(&(sample.label as u32).to_le_bytes());
                for &v in &sample.image {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(Error::BadHeader { what: "dataset".into(), detail: format!("magic {magic:?} is not NRLD1") });
        }
        let version = r.take(1, "version")?[0];
        if version != VERSION {
            return Err(Error::BadHeader { what: "dataset".into(), detail: format!("unsupported version {version}") });
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32("spec")? as usize;
        }
        let spec = DatasetSpec {
            num_classes: dims[0],
            train_samples: dims[1],
            val_samples: dims[2],
            test_samples: dims[3],
            num_patches: dims[4],
            patch_dim: dims[5],
            signal_patch_fraction: r.f64("spec")?,
            noise_std: r.f64("spec")?,
            class_separation: r.f64("spec")?,
            seed: r.u64("spec")?,
        };
        spec.validate().map_err(|e| Error::BadHeader { what: "dataset".into(), detail: e.to_string() })?;
        let mut splits = Vec::with_capacity(3);
        for (name, expected) in [("train", spec.train_samples), ("val", spec.val_samples), ("test", spec.test_samples)] {
            let count = r.u32(name)? as usize;
            if count != expected {
                return Err(Error::BadHeader {
                    what: "dataset".into(),
                    detail: format!("{name} split holds {count} samples but the header says {expected}"),
                });
            }
            let mut samples = Vec::with_capacity(count);
            for _ in 0..count {
                let label = r.u32(name)? as usize;
                if label >= spec.num_classes {
                    return Err(Error::BadHeader {
                        what: "dataset".into(),
                        detail: format!("label {label} in {name} split exceeds {} classes", spec.num_classes),
                    });
                }
                let raw = r.take(4 * spec.sample_len(), name)?;
                let image = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
                samples.push(Sample { image, label });
            }
            splits.push(samples);
        }
        if r.pos != bytes.len() {
            return Err(Error::BadHeader {
                what: "dataset".into(),
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let test = splits.pop().unwrap();
        let val = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(Dataset { spec, train, val, test })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated { what: format!("dataset {what}"), offset: self.pos, needed: n });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Index batches for one epoch. The order depends only on `(seed, epoch)`;
/// the final short batch is kept.
pub fn batch_iter(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    Rng::new(seed).stream(&format!("batches.epoch{epoch}")).shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> DatasetSpec {
        DatasetSpec { train_samples: 40, val_samples: 11, test_samples: 9, ..Default::default() }
    }

    #[test]
    fn noiseless_full_signal_images_repeat_per_class() {
        let spec = DatasetSpec { noise_std: 0.0, signal_patch_fraction: 1.0, num_classes: 3, ..small() };
        let ds = generate(&spec).unwrap();
        for c in 0..3 {
            let mut same = ds.train.iter().filter(|s| s.label == c);
            let first = same.next().unwrap();
            assert!(same.all(|s| s.image == first.image));
        }
    }

    #[test]
    fn prototypes_are_separated() {
        for (c, d, sep) in [(2, 12, 3.0), (5, 4, 1.5), (10, 3, 0.7), (4, 4, 10.0)] {
            let spec = DatasetSpec { num_classes: c, patch_dim: d, class_separation: sep, ..small() };
            let p = prototypes(&spec).unwrap();
            assert_eq!(p.len(), c);
            for i in 0..c {
                for j in i + 1..c {
                    let dist = p[i].iter().zip(&p[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    assert!(dist >= sep, "{c} classes in {d} dims: {dist} < {sep}");
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        for split in [&a.train, &a.val, &a.test] {
            let ones = split.iter().filter(|s| s.label == 1).count();
            let zeros = split.len() - ones;
            assert!(ones.abs_diff(zeros) <= 1);
        }
        let other = generate(&DatasetSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.to_bytes(), other.to_bytes());
    }

    #[test]
    fn splits_are_disjoint() {
        let ds = generate(&small()).unwrap();
        let key = |s: &Sample| s.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let mut seen = HashSet::new();
        for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            assert!(seen.insert(key(s)));
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ds = generate(&small()).unwrap();
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.train.len(), 40);
        assert_eq!(back.val.len(), 11);
        assert_eq!(back.test.len(), 9);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.nrld");
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
    }

    #[test]
    fn corrupt_files_give_distinct_errors() {
        let bytes = generate(&small()).unwrap().to_bytes();
        let truncated = Dataset::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(truncated, Error::Truncated { .. }), "{truncated}");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad).unwrap_err(), Error::BadHeader { .. }));

        let mut bad_version = bytes.clone();
        bad_version[5] = 9;
        assert!(matches!(Dataset::from_bytes(&bad_version).unwrap_err(), Error::BadHeader { .. }));

        assert!(matches!(Dataset::from_bytes(&bytes[..3]).unwrap_err(), Error::Truncated { .. }));

        let ds = Dataset::from_bytes(&bytes).unwrap();
        let mut config = ModelConfig::toy();
        ds.check_compatible(&config).unwrap();
        config.patch_dim = 5;
        assert!(matches!(ds.check_compatible(&config).unwrap_err(), Error::DimMismatch(_)));
    }

    #[test]
    fn batches_cover_the_split() {
        let batches = batch_iter(10, 3, 7, 1).unwrap();
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<_> = batches.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        assert_eq!(batch_iter(5, 8, 7, 1).unwrap().len(), 1);
        assert_eq!(batch_iter(10, 3, 7, 1).unwrap(), batches);
        assert_ne!(batch_iter(10, 3, 7, 2).unwrap(), batches);
        assert!(batch_iter(10, 0, 7, 1).is_err());
    }
}
