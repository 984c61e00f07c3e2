//! The assembled two-tower model with its adapters.

use crate::adapters::{lora_delta, AdapterBank};
use crate::backbone::{eos_features, project_joint, Backbone, JointFeatures};
use crate::config::{AblationMode, ModelConfig, OrthoTarget};
use crate::error::{Error, Result};
use crate::oca::{oca_apply, oca_delta, orthogonalize};
use crate::prompt::{build_prompts, PromptBatch, PromptSpec, Vocabulary};
use crate::tensor::Tensor;
use crate::useformer::{useformer_forward, QuerySummaries};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tower {
    Image,
    Text,
}

/// One adapter increment as it entered the residual stream.
#[derive(Clone, Debug)]
pub struct Increment {
    pub layer: usize,
    pub tower: Tower,
    pub delta: Tensor,
    /// The pre-trained feature the increment was projected against.
    pub reference: Tensor,
}

#[derive(Clone, Debug)]
pub struct AdaptedOutput {
    /// `1 × classes`.
    pub logits: Tensor,
    pub joint: JointFeatures,
    pub image_trace: Vec<Tensor>,
    pub text_trace: Vec<Tensor>,
    pub increments: Vec<Increment>,
}

#[derive(Clone, Debug)]
pub struct NearlModel {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub adapters: AdapterBank,
    pub prompts: PromptBatch,
}

/// Builds the backbone, prompts and the adapter set for `config.mode`.
pub fn build_variant(config: &ModelConfig, prompts: &PromptSpec) -> Result<NearlModel> {
    NearlModel::new(config.clone(), prompts)
}

impl NearlModel {
    pub fn new(config: ModelConfig, prompt_spec: &PromptSpec) -> Result<Self> {
        config.validate()?;
        if prompt_spec.class_names.len() != config.num_classes {
            return Err(Error::Config(format!(
                "{} class names for num_classes = {}",
                prompt_spec.class_names.len(),
                config.num_classes
            )));
        }
        let vocab = Vocabulary::builtin();
        if vocab.len() > config.vocab_size {
            return Err(Error::Config(format!(
                "vocab_size {} is smaller than the {}-word vocabulary",
                config.vocab_size,
                vocab.len()
            )));
        }
        let prompts = build_prompts(prompt_spec, &vocab, config.text_len)?;
        Ok(NearlModel {
            backbone: Backbone::init(&config)?,
            adapters: AdapterBank::init(&config)?,
            prompts,
            config,
        })
    }

    pub fn mode(&self) -> AblationMode {
        self.config.mode
    }

    /// Every tensor of the model, backbone first, each group name-sorted.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone.named_tensors();
        out.extend(self.adapters.named_tensors());
        out
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.backbone.named_tensors_mut();
        out.extend(self.adapters.named_tensors_mut());
        out
    }

    /// Unadapted two-tower logits, `1 × classes`.
    pub fn frozen_logits(&self, image: &Tensor) -> Result<Tensor> {
        let img = self.backbone.encode_image_frozen(image)?;
        let txt = self.backbone.encode_text_frozen(&self.prompts)?;
        project_joint(&img.global()?, &txt.eos, &self.adapters.proj_image, &self.adapters.proj_text)?
            .logits(self.config.temperature)
    }

    fn summaries(&self, fv: &Tensor, ft: &Tensor) -> Result<Option<QuerySummaries>> {
        if let Some(u) = &self.adapters.useformer {
            return Ok(Some(useformer_forward(fv, ft, u)?));
        }
        if let Some(p) = &self.adapters.pooled {
            return Ok(Some(p.forward(fv, ft)?));
        }
        Ok(None)
    }

    fn adapt(
        &self,
        tower: Tower,
        layer: usize,
        prev: &Tensor,
        next: Tensor,
        summary: Option<&Tensor>,
        increments: &mut Vec<Increment>,
    ) -> Result<Tensor> {
        let (oca, lora) = match tower {
            Tower::Image => (self.adapters.oca_image.get(&layer), self.adapters.lora_image.get(&layer)),
            Tower::Text => (self.adapters.oca_text.get(&layer), self.adapters.lora_text.get(&layer)),
        };
        let (delta, reference) = if let Some(w) = lora {
            (lora_delta(prev, w)?, next.clone())
        } else if let (Some(w), Some(z)) = (oca, summary) {
            let raw = oca_delta(prev, z, w)?;
            let reference = match self.config.ortho_target {
                OrthoTarget::Output => next.clone(),
                OrthoTarget::Input => prev.clone(),
            };
            let delta = if self.mode().orthogonalizes() {
                orthogonalize(&raw, &reference, self.config.ortho_eps)?
            } else {
                raw
            };
            (delta, reference)
        } else {
            return Err(Error::Config(format!("no adapter for {tower:?} layer {layer} in mode {}", self.mode())));
        };
        let out = oca_apply(&next, &delta)?;
        increments.push(Increment { layer, tower, delta, reference });
        Ok(out)
    }

    /// Lockstep forward for one image: both towers advance one frozen layer
    /// at a time, and hooked layers add adapter increments computed from the
    /// already-adapted features of the previous layer.
    pub fn adapted_forward(&self, image: &Tensor) -> Result<AdaptedOutput> {
        let mut fv = self.backbone.embed_image(image)?;
        let mut ft = self.backbone.embed_text(&self.prompts)?;
        let mut image_trace = vec![fv.clone()];
        let mut text_trace = vec![ft.clone()];
        let mut increments = Vec::new();
        let active = self.mode() != AblationMode::Frozen;
        for k in 0..self.backbone.num_layers() {
            let layer = k + 1;
            let mut fv_next = self.backbone.image.layers[k].forward(&fv)?;
            let mut ft_next = self.backbone.text.layers[k].forward(&ft)?;
            if active && self.config.is_hooked(layer) {
                let z = self.summaries(&fv, &ft)?;
                fv_next = self.adapt(Tower::Image, layer, &fv, fv_next, z.as_ref().map(|z| &z.image), &mut increments)?;
                ft_next = self.adapt(Tower::Text, layer, &ft, ft_next, z.as_ref().map(|z| &z.text), &mut increments)?;
            }
            fv = fv_next;
            ft = ft_next;
            image_trace.push(fv.clone());
            text_trace.push(ft.clone());
        }
        let global = fv.index_select(&[0])?;
        let eos = eos_features(&ft, &self.prompts)?;
        let joint = project_joint(&global, &eos, &self.adapters.proj_image, &self.adapters.proj_text)?;
        Ok(AdaptedOutput { logits: joint.logits(self.config.temperature)?, joint, image_trace, text_trace, increments })
    }

    /// `batch × classes` logits. When the text tower cannot see the image it
    /// is run once for the batch; otherwise every sample runs both towers.
    pub fn forward_batch(&self, images: &[Tensor]) -> Result<(Tensor, Vec<AdaptedOutput>)> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.mode().is_cross_modal() {
            let outs = images.iter().map(|img| self.adapted_forward(img)).collect::<Result<Vec<_>>>()?;
            let logits = Tensor::cat_rows(&outs.iter().map(|o| o.logits.clone()).collect::<Vec<_>>())?;
            return Ok((logits, outs));
        }
        let text = self.encode_text_unimodal()?;
        let mut outs = Vec::with_capacity(images.len());
        for img in images {
            outs.push(self.image_only_forward(img, &text)?);
        }
        let logits = Tensor::cat_rows(&outs.iter().map(|o| o.logits.clone()).collect::<Vec<_>>())?;
        Ok((logits, outs))
    }

    /// Text tower with only its own (image-independent) adapters applied.
    fn encode_text_unimodal(&self) -> Result<(Vec<Tensor>, Vec<Increment>)> {
        let mut ft = self.backbone.embed_text(&self.prompts)?;
        let mut trace = vec![ft.clone()];
        let mut increments = Vec::new();
        for k in 0..self.backbone.num_layers() {
            let mut next = self.backbone.text.layers[k].forward(&ft)?;
            if self.mode() == AblationMode::Lora && self.config.is_hooked(k + 1) {
                next = self.adapt(Tower::Text, k + 1, &ft, next, None, &mut increments)?;
            }
            ft = next;
            trace.push(ft.clone());
        }
        Ok((trace, increments))
    }

    fn image_only_forward(&self, image: &Tensor, text: &(Vec<Tensor>, Vec<Increment>)) -> Result<AdaptedOutput> {
        let mut fv = self.backbone.embed_image(image)?;
        let mut image_trace = vec![fv.clone()];
        let mut increments = Vec::new();
        for k in 0..self.backbone.num_layers() {
            let mut next = self.backbone.image.layers[k].forward(&fv)?;
            if self.mode() == AblationMode::Lora && self.config.is_hooked(k + 1) {
                next = self.adapt(Tower::Image, k + 1, &fv, next, None, &mut increments)?;
            }
            fv = next;
            image_trace.push(fv.clone());
        }
        increments.extend(text.1.iter().cloned());
        let eos = eos_features(text.0.last().expect("non-empty trace"), &self.prompts)?;
        let joint = project_joint(&fv.index_select(&[0])?, &eos, &self.adapters.proj_image, &self.adapters.proj_text)?;
        Ok(AdaptedOutput {
            logits: joint.logits(self.config.temperature)?,
            joint,
            image_trace,
            text_trace: text.0.clone(),
            increments,
        })
    }
}
