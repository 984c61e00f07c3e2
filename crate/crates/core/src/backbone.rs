//! Frozen CLIP-shaped two-tower encoder.
//!
//! The image tower embeds a patch grid, prepends a global token and adds
//! learned positions; the text tower embeds class prompts token by token.
//! Both run `num_layers` pre-norm single-head transformer layers. All weights
//! are random, seeded, and never receive gradients.

use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Ffn, LayerNorm, Linear};
use crate::prompt::PromptBatch;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
}

impl EncoderLayer {
    fn init(rng: &Rng, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        let std = (dim as f64).powf(-0.5);
        let mat = |key: &str| Tensor::randn(&[dim, dim], &mut rng.stream(&format!("{name}.{key}")), std);
        Ok(EncoderLayer {
            ln1: LayerNorm::identity(dim)?,
            wq: mat("wq")?,
            wk: mat("wk")?,
            wv: mat("wv")?,
            wo: Linear::init(rng, &format!("{name}.wo"), dim, dim, std, true, false)?,
            ln2: LayerNorm::identity(dim)?,
            ffn: Ffn::init(rng, &format!("{name}.ffn"), dim, hidden, false)?,
        })
    }

    /// `h = x + Attn(LN(x)) W_o`, `out = h + FFN(LN(h))`; works on `[n, d]`
    /// and batched `[c, n, d]` inputs.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.wq.shape()[0];
        let normed = self.ln1.forward(x)?;
        let attn = nn::cross_attention(&normed, &normed, &self.wq, &self.wk, &self.wv, d as f64)?;
        let h = x.add(&self.wo.forward(&attn)?)?;
        h.add(&self.ffn.forward(&self.ln2.forward(&h)?)?)
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("ln1.gamma".to_string(), &self.ln1.gamma),
            ("ln1.beta".to_string(), &self.ln1.beta),
            ("wq".to_string(), &self.wq),
            ("wk".to_string(), &self.wk),
            ("wv".to_string(), &self.wv),
            ("ln2.gamma".to_string(), &self.ln2.gamma),
            ("ln2.beta".to_string(), &self.ln2.beta),
        ];
        out.extend(self.wo.tensors().into_iter().map(|(n, t)| (format!("wo.{n}"), t)));
        out.extend(self.ffn.tensors().into_iter().map(|(n, t)| (format!("ffn.{n}"), t)));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("ln1.gamma".to_string(), &mut self.ln1.gamma),
            ("ln1.beta".to_string(), &mut self.ln1.beta),
            ("wq".to_string(), &mut self.wq),
            ("wk".to_string(), &mut self.wk),
            ("wv".to_string(), &mut self.wv),
            ("ln2.gamma".to_string(), &mut self.ln2.gamma),
            ("ln2.beta".to_string(), &mut self.ln2.beta),
        ];
        out.extend(self.wo.tensors_mut().into_iter().map(|(n, t)| (format!("wo.{n}"), t)));
        out.extend(self.ffn.tensors_mut().into_iter().map(|(n, t)| (format!("ffn.{n}"), t)));
        out
    }
}

#[derive(Clone, Debug)]
pub struct ImageTower {
    pub patch_embed: Linear,
    pub global_token: Tensor,
    pub position: Tensor,
    pub layers: Vec<EncoderLayer>,
}

#[derive(Clone, Debug)]
pub struct TextTower {
    pub token_embedding: Tensor,
    pub position: Tensor,
    pub layers: Vec<EncoderLayer>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub image: ImageTower,
    pub text: TextTower,
}

/// Per-layer features of the image tower: `trace[k]` is `f^v_k`, shape
/// `(num_patches + 1) × image_dim` with the global token in row 0.
#[derive(Clone, Debug)]
pub struct ImageEncoding {
    pub trace: Vec<Tensor>,
}

impl ImageEncoding {
    pub fn global(&self) -> Result<Tensor> {
        self.trace.last().expect("non-empty trace").index_select(&[0])
    }

    pub fn patches(&self) -> Result<Tensor> {
        let last = self.trace.last().expect("non-empty trace");
        let ids: Vec<usize> = (1..last.shape()[0]).collect();
        last.index_select(&ids)
    }
}

/// Per-layer features of the text tower: `trace[k]` is `f^t_k`, shape
/// `classes × text_len × text_dim`, plus each class's end-of-sequence row.
#[derive(Clone, Debug)]
pub struct TextEncoding {
    pub trace: Vec<Tensor>,
    pub eos: Tensor,
}

/// Unit-norm joint-space features.
#[derive(Clone, Debug)]
pub struct JointFeatures {
    /// `1 × joint_dim` image vector.
    pub v: Tensor,
    /// `classes × joint_dim` class text vectors.
    pub s: Tensor,
}

impl JointFeatures {
    /// `(v · s_c) / τ` for every class, shape `1 × classes`.
    pub fn logits(&self, temperature: f64) -> Result<Tensor> {
        Ok(self.v.matmul(&self.s.transpose()?)?.scale(1.0 / temperature))
    }
}

/// Rows of a `[rows, d]` tensor scaled to unit Euclidean norm.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let d = *x.shape().last().expect("tensor has dims");
    for (r, row) in x.data().chunks(d).enumerate() {
        if row.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidArgument(format!("cannot normalize zero vector (row {r})")));
        }
    }
    let axis = x.ndim() - 1;
    let norm = x.mul(x)?.sum_axis(axis)?.sqrt();
    x.div(&norm)
}

/// Projects the global image feature and the class EOS features into the
/// shared space and normalizes them.
pub fn project_joint(global: &Tensor, eos: &Tensor, image_proj: &Tensor, text_proj: &Tensor) -> Result<JointFeatures> {
    Ok(JointFeatures {
        v: l2_normalize_rows(&global.matmul(image_proj)?)?,
        s: l2_normalize_rows(&eos.matmul(text_proj)?)?,
    })
}

impl Backbone {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let rng = Rng::new(config.seed);
        let (dv, dt) = (config.image_dim, config.text_dim);
        let image = ImageTower {
            patch_embed: Linear::init(
                &rng,
                "backbone.image.patch",
                config.patch_dim,
                dv,
                (config.patch_dim as f64).powf(-0.5),
                true,
                false,
            )?,
            global_token: Tensor::randn(&[1, dv], &mut rng.stream("backbone.image.global"), 1.0)?,
            position: Tensor::randn(&[config.num_patches + 1, dv], &mut rng.stream("backbone.image.pos"), 0.1)?,
            layers: (0..config.num_layers)
                .map(|k| EncoderLayer::init(&rng, &format!("backbone.image.layer{}", k + 1), dv, config.backbone_ffn_dim))
                .collect::<Result<_>>()?,
        };
        let text = TextTower {
            token_embedding: Tensor::randn(&[config.vocab_size, dt], &mut rng.stream("backbone.text.embed"), 1.0)?,
            position: Tensor::randn(&[config.text_len, dt], &mut rng.stream("backbone.text.pos"), 0.1)?,
            layers: (0..config.num_layers)
                .map(|k| EncoderLayer::init(&rng, &format!("backbone.text.layer{}", k + 1), dt, config.backbone_ffn_dim))
                .collect::<Result<_>>()?,
        };
        Ok(Backbone { image, text })
    }

    pub fn num_layers(&self) -> usize {
        self.image.layers.len()
    }

    pub fn num_patches(&self) -> usize {
        self.image.position.shape()[0] - 1
    }

    /// `f^v_0`: global token followed by embedded patches, plus positions.
    pub fn embed_image(&self, image: &Tensor) -> Result<Tensor> {
        let n = self.num_patches();
        let patch_dim = self.image.patch_embed.in_dim();
        if image.shape() != [n, patch_dim] {
            return Err(Error::DimMismatch(format!(
                "image has shape {:?}, expected [{n}, {patch_dim}]",
                image.shape()
            )));
        }
        let patches = self.image.patch_embed.forward(image)?;
        Tensor::cat_rows(&[self.image.global_token.clone(), patches])?.add(&self.image.position)
    }

    /// `f^t_0`: `classes × text_len × text_dim` token plus position embeddings.
    pub fn embed_text(&self, prompts: &PromptBatch) -> Result<Tensor> {
        let len = self.text.position.shape()[0];
        let dim = self.text.position.shape()[1];
        if prompts.ids.iter().any(|row| row.len() != len) {
            return Err(Error::DimMismatch(format!("prompt rows must have {len} tokens")));
        }
        let tokens = nn::embed(&prompts.flat_ids(), &self.text.token_embedding)?;
        tokens.reshape(&[prompts.num_classes(), len, dim])?.add(&self.text.position)
    }

    pub fn encode_image_frozen(&self, image: &Tensor) -> Result<ImageEncoding> {
        let mut trace = vec![self.embed_image(image)?];
        for layer in &self.image.layers {
            let next = layer.forward(trace.last().unwrap())?;
            trace.push(next);
        }
        Ok(ImageEncoding { trace })
    }

    pub fn encode_text_frozen(&self, prompts: &PromptBatch) -> Result<TextEncoding> {
        let mut trace = vec![self.embed_text(prompts)?];
        for layer in &self.text.layers {
            let next = layer.forward(trace.last().unwrap())?;
            trace.push(next);
        }
        let eos = eos_features(trace.last().unwrap(), prompts)?;
        Ok(TextEncoding { trace, eos })
    }

    /// Name-sorted list of every frozen tensor.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("backbone.image.global".to_string(), &self.image.global_token),
            ("backbone.image.pos".to_string(), &self.image.position),
            ("backbone.text.embed".to_string(), &self.text.token_embedding),
            ("backbone.text.pos".to_string(), &self.text.position),
        ];
        out.extend(self.image.patch_embed.tensors().into_iter().map(|(n, t)| (format!("backbone.image.patch.{n}"), t)));
        for (tower, layers) in [("image", &self.image.layers), ("text", &self.text.layers)] {
            for (k, layer) in layers.iter().enumerate() {
                out.extend(
                    layer
                        .tensors()
                        .into_iter()
                        .map(|(n, t)| (format!("backbone.{tower}.layer{}.{n}", k + 1), t)),
                );
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("backbone.image.global".to_string(), &mut self.image.global_token),
            ("backbone.image.pos".to_string(), &mut self.image.position),
            ("backbone.text.embed".to_string(), &mut self.text.token_embedding),
            ("backbone.text.pos".to_string(), &mut self.text.position),
        ];
        out.extend(
            self.image
                .patch_embed
                .tensors_mut()
                .into_iter()
                .map(|(n, t)| (format!("backbone.image.patch.{n}"), t)),
        );
        for (tower, layers) in [("image", &mut self.image.layers), ("text", &mut self.text.layers)] {
            for (k, layer) in layers.iter_mut().enumerate() {
                out.extend(
                    layer
                        .tensors_mut()
                        .into_iter()
                        .map(|(n, t)| (format!("backbone.{tower}.layer{}.{n}", k + 1), t)),
                );
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// SHA-256 over every frozen tensor's name, shape and little-endian bytes.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.named_tensors() {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Row `eos_index[c]` of class `c` from a `classes × len × dim` feature.
pub fn eos_features(features: &Tensor, prompts: &PromptBatch) -> Result<Tensor> {
    let (classes, len, dim) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let ids: Vec<usize> = prompts.eos_index.iter().enumerate().map(|(c, &e)| c * len + e).collect();
    features.reshape(&[classes * len, dim])?.index_select(&ids)
}
