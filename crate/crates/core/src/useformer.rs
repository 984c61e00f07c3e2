//! Bidirectional query fusion between the two towers.
//!
//! Two learnable query banks alternately read the opposing tower: text
//! queries attend over projected image tokens, image queries over projected
//! text tokens. One `W_Q/W_K/W_V` triple serves both directions, every stacked
//! layer and every encoder hook point. Each stacked layer applies
//! `q ← q + FFN_l(q + Attn(q, h))` to both banks from the same input state.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Ffn};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const QUERY_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct UseformerWeights {
    /// `P^v`: image_dim → query_dim.
    pub proj_image: Tensor,
    /// `P^t`: text_dim → query_dim.
    pub proj_text: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// One feed-forward block per stacked layer.
    pub ffn: Vec<Ffn>,
    /// `q^v`, refined into the summary consumed by the image tower.
    pub queries_image: Tensor,
    /// `q^t`, refined into the summary consumed by the text tower.
    pub queries_text: Tensor,
}

/// `z^v_k` and `z^t_k`, each `num_queries × query_dim`.
#[derive(Clone, Debug)]
pub struct QuerySummaries {
    pub image: Tensor,
    pub text: Tensor,
}

impl UseformerWeights {
    pub fn init(config: &ModelConfig, rng: &Rng) -> Result<Self> {
        let dq = config.query_dim;
        let param = |key: &str, shape: &[usize], std: f64| -> Result<Tensor> {
            Ok(Tensor::randn(shape, &mut rng.stream(&format!("useformer.{key}")), std)?.with_requires_grad(true))
        };
        let inv_sqrt = |d: usize| (d as f64).powf(-0.5);
        Ok(UseformerWeights {
            proj_image: param("proj_image", &[config.image_dim, dq], inv_sqrt(config.image_dim))?,
            proj_text: param("proj_text", &[config.text_dim, dq], inv_sqrt(config.text_dim))?,
            wq: param("wq", &[dq, dq], inv_sqrt(dq))?,
            wk: param("wk", &[dq, dq], inv_sqrt(dq))?,
            wv: param("wv", &[dq, dq], inv_sqrt(dq))?,
            ffn: (0..config.useformer_depth)
                .map(|l| Ffn::init(rng, &format!("useformer.ffn{l}"), dq, config.useformer_ffn_dim, true))
                .collect::<Result<_>>()?,
            queries_image: param("query_image", &[config.num_queries, dq], QUERY_INIT_STD)?,
            queries_text: param("query_text", &[config.num_queries, dq], QUERY_INIT_STD)?,
        })
    }

    pub fn depth(&self) -> usize {
        self.ffn.len()
    }

    pub fn query_dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("proj_image".to_string(), &self.proj_image),
            ("proj_text".to_string(), &self.proj_text),
            ("wq".to_string(), &self.wq),
            ("wk".to_string(), &self.wk),
            ("wv".to_string(), &self.wv),
            ("query_image".to_string(), &self.queries_image),
            ("query_text".to_string(), &self.queries_text),
        ];
        for (l, f) in self.ffn.iter().enumerate() {
            out.extend(f.tensors().into_iter().map(|(n, t)| (format!("ffn{l}.{n}"), t)));
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("proj_image".to_string(), &mut self.proj_image),
            ("proj_text".to_string(), &mut self.proj_text),
            ("wq".to_string(), &mut self.wq),
            ("wk".to_string(), &mut self.wk),
            ("wv".to_string(), &mut self.wv),
            ("query_image".to_string(), &mut self.queries_image),
            ("query_text".to_string(), &mut self.queries_text),
        ];
        for (l, f) in self.ffn.iter_mut().enumerate() {
            out.extend(f.tensors_mut().into_iter().map(|(n, t)| (format!("ffn{l}.{n}"), t)));
        }
        out
    }
}

/// `h^v_k = f^v_k P^v` and `h^t_k = flatten(f^t_k) P^t`, where the class
/// prompts are flattened along the token axis.
pub fn project_features(image_feats: &Tensor, text_feats: &Tensor, w: &UseformerWeights) -> Result<(Tensor, Tensor)> {
    if image_feats.ndim() != 2 || image_feats.shape()[1] != w.proj_image.shape()[0] {
        return Err(Error::shape("useformer image projection", image_feats.shape(), w.proj_image.shape()));
    }
    let dt = w.proj_text.shape()[0];
    if text_feats.shape().last() != Some(&dt) {
        return Err(Error::shape("useformer text projection", text_feats.shape(), w.proj_text.shape()));
    }
    let flat = text_feats.reshape(&[text_feats.numel() / dt, dt])?;
    Ok((image_feats.matmul(&w.proj_image)?, flat.matmul(&w.proj_text)?))
}

/// One stacked layer. Returns `(text_queries', image_queries')`; both
/// directions read the same input state.
pub fn useformer_layer(
    text_queries: &Tensor,
    image_queries: &Tensor,
    h_image: &Tensor,
    h_text: &Tensor,
    w: &UseformerWeights,
    layer: usize,
) -> Result<(Tensor, Tensor)> {
    let ffn = w.ffn.get(layer).ok_or_else(|| {
        Error::InvalidArgument(format!("useformer layer {layer} out of range for depth {}", w.depth()))
    })?;
    let scale = w.query_dim() as f64;
    let i2t = nn::cross_attention(text_queries, h_image, &w.wq, &w.wk, &w.wv, scale)?;
    let t2i = nn::cross_attention(image_queries, h_text, &w.wq, &w.wk, &w.wv, scale)?;
    let text_next = text_queries.add(&ffn.forward(&text_queries.add(&i2t)?)?)?;
    let image_next = image_queries.add(&ffn.forward(&image_queries.add(&t2i)?)?)?;
    Ok((text_next, image_next))
}

/// Runs all stacked layers from the learnable query banks.
pub fn useformer_forward(image_feats: &Tensor, text_feats: &Tensor, w: &UseformerWeights) -> Result<QuerySummaries> {
    let (h_image, h_text) = project_features(image_feats, text_feats, w)?;
    let mut qt = w.queries_text.clone();
    let mut qv = w.queries_image.clone();
    for layer in 0..w.depth() {
        (qt, qv) = useformer_layer(&qt, &qv, &h_image, &h_text, w, layer)?;
    }
    Ok(QuerySummaries { image: qv, text: qt })
}
