//! Architectural hyperparameters and ablation switches.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// USEformer queries + OCA + orthogonal projection.
    Full,
    /// As `Full`, increments added without orthogonal projection.
    NoOr,
    /// USEformer replaced by a linear map of the opposing tower's pooled features.
    NoUseformer,
    /// Low-rank residual adapters only.
    Lora,
    /// No adapters; projector heads fixed.
    Frozen,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Full,
        AblationMode::NoOr,
        AblationMode::NoUseformer,
        AblationMode::Lora,
        AblationMode::Frozen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoOr => "no_or",
            AblationMode::NoUseformer => "no_useformer",
            AblationMode::Lora => "lora",
            AblationMode::Frozen => "frozen",
        }
    }

    /// Whether the text tower depends on the image (and vice versa).
    pub fn is_cross_modal(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::NoOr | AblationMode::NoUseformer)
    }

    pub fn uses_useformer(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::NoOr)
    }

    pub fn orthogonalizes(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::NoUseformer)
    }

    pub fn is_trainable(self) -> bool {
        self != AblationMode::Frozen
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

/// Which pre-trained feature the adapter increment is projected against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthoTarget {
    /// The frozen layer's output the increment is added to.
    Output,
    /// The layer input the adapter reads from.
    Input,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_dim: usize,
    pub text_dim: usize,
    pub query_dim: usize,
    pub num_queries: usize,
    /// Patch tokens per image, not counting the global token.
    pub num_patches: usize,
    pub patch_dim: usize,
    pub text_len: usize,
    pub useformer_depth: usize,
    pub rank: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    pub temperature: f64,
    pub backbone_ffn_dim: usize,
    pub useformer_ffn_dim: usize,
    pub joint_dim: usize,
    pub vocab_size: usize,
    pub attention_heads: usize,
    pub seed: u64,
    pub mode: AblationMode,
    /// 1-based encoder layers carrying adapters; `None` means all of them.
    pub layer_mask: Option<Vec<usize>>,
    pub ortho_eps: f64,
    pub ortho_target: OrthoTarget,
}

pub const ORTHO_EPS: f64 = 1e-8;

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale default used by tests and the synthetic benchmark.
    pub fn toy() -> Self {
        ModelConfig {
            image_dim: 64,
            text_dim: 48,
            query_dim: 16,
            num_queries: 8,
            num_patches: 16,
            patch_dim: 12,
            text_len: 8,
            useformer_depth: 2,
            rank: 4,
            num_layers: 4,
            num_classes: 2,
            temperature: 1e-2,
            backbone_ffn_dim: 128,
            useformer_ffn_dim: 32,
            joint_dim: 32,
            vocab_size: 64,
            attention_heads: 1,
            seed: 0,
            mode: AblationMode::Full,
            layer_mask: None,
            ortho_eps: ORTHO_EPS,
            ortho_target: OrthoTarget::Output,
        }
    }

    /// Smallest configuration that still exercises every code path.
    pub fn tiny() -> Self {
        ModelConfig {
            image_dim: 8,
            text_dim: 6,
            query_dim: 4,
            num_queries: 2,
            num_patches: 3,
            patch_dim: 4,
            text_len: 6,
            useformer_depth: 2,
            rank: 2,
            num_layers: 2,
            num_classes: 2,
            temperature: 1e-2,
            backbone_ffn_dim: 16,
            useformer_ffn_dim: 8,
            joint_dim: 4,
            vocab_size: 40,
            attention_heads: 1,
            seed: 0,
            mode: AblationMode::Full,
            layer_mask: None,
            ortho_eps: ORTHO_EPS,
            ortho_target: OrthoTarget::Output,
        }
    }

    /// ViT-B/16-sized dimensions, used only for parameter counting.
    pub fn clip_b16() -> Self {
        ModelConfig {
            image_dim: 768,
            text_dim: 512,
            query_dim: 128,
            num_queries: 32,
            num_patches: 196,
            patch_dim: 768,
            text_len: 77,
            useformer_depth: 6,
            rank: 8,
            num_layers: 12,
            num_classes: 2,
            temperature: 1e-2,
            backbone_ffn_dim: 3072,
            useformer_ffn_dim: 256,
            joint_dim: 512,
            vocab_size: 49408,
            attention_heads: 1,
            seed: 0,
            mode: AblationMode::Full,
            layer_mask: None,
            ortho_eps: ORTHO_EPS,
            ortho_target: OrthoTarget::Output,
        }
    }

    pub fn with_mode(mut self, mode: AblationMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("image_dim", self.image_dim),
            ("text_dim", self.text_dim),
            ("query_dim", self.query_dim),
            ("num_queries", self.num_queries),
            ("num_patches", self.num_patches),
            ("patch_dim", self.patch_dim),
            ("text_len", self.text_len),
            ("useformer_depth", self.useformer_depth),
            ("rank", self.rank),
            ("num_layers", self.num_layers),
            ("num_classes", self.num_classes),
            ("backbone_ffn_dim", self.backbone_ffn_dim),
            ("useformer_ffn_dim", self.useformer_ffn_dim),
            ("joint_dim", self.joint_dim),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.rank > self.image_dim.min(self.text_dim) {
            return Err(Error::Config(format!(
                "rank {} exceeds min(image_dim, text_dim) = {}",
                self.rank,
                self.image_dim.min(self.text_dim)
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.ortho_eps >= 0.0 && self.ortho_eps.is_finite()) {
            return Err(Error::Config(format!("ortho_eps must be non-negative, got {}", self.ortho_eps)));
        }
        if self.attention_heads != 1 {
            return Err(Error::Config(format!(
                "attention_heads = {} is not supported; attention is single-head",
                self.attention_heads
            )));
        }
        if let Some(mask) = &self.layer_mask {
            if let Some(bad) = mask.iter().find(|&&k| k == 0 || k > self.num_layers) {
                return Err(Error::Config(format!("layer_mask entry {bad} outside 1..={}", self.num_layers)));
            }
        }
        Ok(())
    }

    /// Sorted, de-duplicated 1-based hook layers.
    pub fn hook_layers(&self) -> Vec<usize> {
        match &self.layer_mask {
            None => (1..=self.num_layers).collect(),
            Some(mask) => mask.iter().copied().collect::<BTreeSet<_>>().into_iter().collect(),
        }
    }

    pub fn is_hooked(&self, layer: usize) -> bool {
        match &self.layer_mask {
            None => (1..=self.num_layers).contains(&layer),
            Some(mask) => mask.contains(&layer),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::clip_b16().validate().unwrap();
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = ModelConfig::tiny();
        c.rank = 7;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.layer_mask = Some(vec![3]);
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.useformer_depth = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn hook_layers_follow_mask() {
        let mut c = ModelConfig::clip_b16();
        assert_eq!(c.hook_layers(), (1..=12).collect::<Vec<_>>());
        c.layer_mask = Some(vec![8, 5, 6, 7, 5]);
        assert_eq!(c.hook_layers(), vec![5, 6, 7, 8]);
        c.layer_mask = Some(vec![]);
        assert!(c.hook_layers().is_empty());
    }

    #[test]
    fn mode_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
        }
        assert!("bogus".parse::<AblationMode>().is_err());
    }
}
