//! Every trainable tensor of an adapted model, grouped by ablation mode.

use std::collections::BTreeMap;

use crate::config::{AblationMode, ModelConfig};
use crate::error::{Error, Result};
use crate::oca::{OcaWeights, ADAPTER_INIT_STD};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::useformer::{QuerySummaries, UseformerWeights};

/// Low-rank residual adapter `(f A) B`.
#[derive(Clone, Debug)]
pub struct LoraWeights {
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraWeights {
    pub fn init(rng: &Rng, name: &str, dim: usize, rank: usize) -> Result<Self> {
        Ok(LoraWeights {
            a: Tensor::randn(&[dim, rank], &mut rng.stream(&format!("{name}.a")), ADAPTER_INIT_STD)?.with_requires_grad(true),
            b: Tensor::zeros(&[rank, dim])?.with_requires_grad(true),
        })
    }
}

pub fn lora_delta(features: &Tensor, w: &LoraWeights) -> Result<Tensor> {
    if features.shape().last() != Some(&w.a.shape()[0]) || w.a.shape()[1] != w.b.shape()[0] {
        return Err(Error::shape("lora", features.shape(), w.a.shape()));
    }
    features.matmul(&w.a)?.matmul(&w.b)
}

/// Stand-in for the query module: each tower's summary is a linear map of
/// the opposing tower's mean-pooled tokens, reshaped to `num_queries × query_dim`.
#[derive(Clone, Debug)]
pub struct PooledProjection {
    /// text_dim → num_queries·query_dim, feeds the image tower.
    pub text_to_image: Tensor,
    /// image_dim → num_queries·query_dim, feeds the text tower.
    pub image_to_text: Tensor,
    num_queries: usize,
    query_dim: usize,
}

impl PooledProjection {
    pub fn init(config: &ModelConfig, rng: &Rng) -> Result<Self> {
        let out = config.num_queries * config.query_dim;
        Ok(PooledProjection {
            text_to_image: Tensor::randn(&[config.text_dim, out], &mut rng.stream("pooled.t2v"), (config.text_dim as f64).powf(-0.5))?
                .with_requires_grad(true),
            image_to_text: Tensor::randn(&[config.image_dim, out], &mut rng.stream("pooled.v2t"), (config.image_dim as f64).powf(-0.5))?
                .with_requires_grad(true),
            num_queries: config.num_queries,
            query_dim: config.query_dim,
        })
    }

    pub fn forward(&self, image_feats: &Tensor, text_feats: &Tensor) -> Result<QuerySummaries> {
        let pool = |x: &Tensor| -> Result<Tensor> {
            let d = *x.shape().last().expect("tensor has dims");
            x.reshape(&[x.numel() / d, d])?.mean_axis(0)
        };
        let shape = [self.num_queries, self.query_dim];
        Ok(QuerySummaries {
            image: pool(text_feats)?.matmul(&self.text_to_image)?.reshape(&shape)?,
            text: pool(image_feats)?.matmul(&self.image_to_text)?.reshape(&shape)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct AdapterBank {
    pub mode: AblationMode,
    pub useformer: Option<UseformerWeights>,
    pub pooled: Option<PooledProjection>,
    /// Keyed by 1-based hook layer.
    pub oca_image: BTreeMap<usize, OcaWeights>,
    pub oca_text: BTreeMap<usize, OcaWeights>,
    pub lora_image: BTreeMap<usize, LoraWeights>,
    pub lora_text: BTreeMap<usize, LoraWeights>,
    pub proj_image: Tensor,
    pub proj_text: Tensor,
}

impl AdapterBank {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let rng = Rng::new(config.seed);
        let mode = config.mode;
        let hooks = config.hook_layers();
        let mut bank = AdapterBank {
            mode,
            useformer: None,
            pooled: None,
            oca_image: BTreeMap::new(),
            oca_text: BTreeMap::new(),
            lora_image: BTreeMap::new(),
            lora_text: BTreeMap::new(),
            proj_image: Tensor::randn(&[config.image_dim, config.joint_dim], &mut rng.stream("proj.image"), (config.image_dim as f64).powf(-0.5))?
                .with_requires_grad(mode.is_trainable()),
            proj_text: Tensor::randn(&[config.text_dim, config.joint_dim], &mut rng.stream("proj.text"), (config.text_dim as f64).powf(-0.5))?
                .with_requires_grad(mode.is_trainable()),
        };
        match mode {
            AblationMode::Full | AblationMode::NoOr | AblationMode::NoUseformer => {
                if mode.uses_useformer() {
                    bank.useformer = Some(UseformerWeights::init(config, &rng)?);
                } else {
                    bank.pooled = Some(PooledProjection::init(config, &rng)?);
                }
                for &k in &hooks {
                    bank.oca_image.insert(k, OcaWeights::for_image(config, &rng, k)?);
                    bank.oca_text.insert(k, OcaWeights::for_text(config, &rng, k)?);
                }
            }
            AblationMode::Lora => {
                for &k in &hooks {
                    bank.lora_image.insert(k, LoraWeights::init(&rng, &format!("lora.v.layer{k}"), config.image_dim, config.rank)?);
                    bank.lora_text.insert(k, LoraWeights::init(&rng, &format!("lora.t.layer{k}"), config.text_dim, config.rank)?);
                }
            }
            AblationMode::Frozen => {}
        }
        Ok(bank)
    }

    /// Name-sorted list of every tensor in the bank, trainable or not.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("proj.image".to_string(), &self.proj_image), ("proj.text".to_string(), &self.proj_text)];
        if let Some(u) = &self.useformer {
            out.extend(u.tensors().into_iter().map(|(n, t)| (format!("useformer.{n}"), t)));
        }
        if let Some(p) = &self.pooled {
            out.push(("pooled.t2v".to_string(), &p.text_to_image));
            out.push(("pooled.v2t".to_string(), &p.image_to_text));
        }
        for (tower, map) in [("v", &self.oca_image), ("t", &self.oca_text)] {
            for (k, w) in map {
                out.extend(w.tensors().into_iter().map(|(n, t)| (format!("oca.{tower}.layer{k}.{n}"), t)));
            }
        }
        for (tower, map) in [("v", &self.lora_image), ("t", &self.lora_text)] {
            for (k, w) in map {
                out.push((format!("lora.{tower}.layer{k}.a"), &w.a));
                out.push((format!("lora.{tower}.layer{k}.b"), &w.b));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("proj.image".to_string(), &mut self.proj_image),
            ("proj.text".to_string(), &mut self.proj_text),
        ];
        if let Some(u) = &mut self.useformer {
            out.extend(u.tensors_mut().into_iter().map(|(n, t)| (format!("useformer.{n}"), t)));
        }
        if let Some(p) = &mut self.pooled {
            out.push(("pooled.t2v".to_string(), &mut p.text_to_image));
            out.push(("pooled.v2t".to_string(), &mut p.image_to_text));
        }
        for (tower, map) in [("v", &mut self.oca_image), ("t", &mut self.oca_text)] {
            for (k, w) in map.iter_mut() {
                out.extend(w.tensors_mut().into_iter().map(|(n, t)| (format!("oca.{tower}.layer{k}.{n}"), t)));
            }
        }
        for (tower, map) in [("v", &mut self.lora_image), ("t", &mut self.lora_text)] {
            for (k, w) in map.iter_mut() {
                out.push((format!("lora.{tower}.layer{k}.a"), &mut w.a));
                out.push((format!("lora.{tower}.layer{k}.b"), &mut w.b));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// The parameters the optimizer updates; empty in frozen mode.
    pub fn trainable_registry(&self) -> Vec<(String, &Tensor)> {
        self.named_tensors().into_iter().filter(|(_, t)| t.requires_grad()).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_registry().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.named_tensors() {
            t.zero_grad();
        }
    }

    /// Zeroes every up-projection (OCA `W_u`, LoRA `B`), returning the model
    /// to its frozen starting point.
    pub fn zero_increments(&mut self) -> Result<()> {
        for w in self.oca_image.values_mut().chain(self.oca_text.values_mut()) {
            w.up = Tensor::zeros(w.up.shape())?.with_requires_grad(true);
        }
        for w in self.lora_image.values_mut().chain(self.lora_text.values_mut()) {
            w.b = Tensor::zeros(w.b.shape())?.with_requires_grad(true);
        }
        Ok(())
    }
}
