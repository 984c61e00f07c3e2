//! Closed-form trainable-parameter counts.
//!
//! Reconstruction assumptions: one shared attention triple for the whole
//! model, one FFN per stacked query layer (shared across hook points) with
//! hidden width `useformer_ffn_dim`, bias-free projections except inside the
//! FFNs, OCA weights per hook layer and tower, and two joint-space projectors.

use std::fmt::Write as _;

use crate::config::{AblationMode, ModelConfig};
use crate::error::Result;

/// Published total the audit is compared against.
pub const REFERENCE_TOTAL: usize = 1_460_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamAudit {
    pub mode: AblationMode,
    pub components: Vec<(&'static str, usize)>,
    pub total: usize,
    /// Total if every hook layer owned its own attention triple.
    pub alternate_total: usize,
}

pub fn count_trainable(config: &ModelConfig) -> Result<ParamAudit> {
    config.validate()?;
    let c = config;
    let hooks = c.hook_layers().len();
    let (dv, dt, dq, r) = (c.image_dim, c.text_dim, c.query_dim, c.rank);
    let mut components = Vec::new();
    let mut alternate_extra = 0;
    match c.mode {
        AblationMode::Frozen => {}
        AblationMode::Lora => {
            components.push(("lora.image", hooks * 2 * dv * r));
            components.push(("lora.text", hooks * 2 * dt * r));
        }
        mode => {
            if mode.uses_useformer() {
                let f = c.useformer_ffn_dim;
                components.push(("useformer.projections", dv * dq + dt * dq));
                components.push(("useformer.shared_attention", 3 * dq * dq));
                components.push(("useformer.ffn", c.useformer_depth * (2 * dq * f + f + dq)));
                components.push(("useformer.queries", 2 * c.num_queries * dq));
                alternate_extra = hooks.saturating_sub(1) * 3 * dq * dq;
            } else {
                components.push(("pooled_projection", (dv + dt) * c.num_queries * dq));
            }
            components.push(("oca.image", hooks * (dv * r + dq * r + r * dv)));
            components.push(("oca.text", hooks * (dt * r + dq * r + r * dt)));
        }
    }
    if c.mode.is_trainable() {
        components.push(("projectors", (dv + dt) * c.joint_dim));
    }
    let total = components.iter().map(|(_, n)| n).sum();
    Ok(ParamAudit { mode: c.mode, components, total, alternate_total: total + alternate_extra })
}

fn millions(n: usize) -> String {
    format!("{:.3}M", n as f64 / 1e6)
}

impl ParamAudit {
    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode: {}", self.mode);
        for (name, n) in &self.components {
            let _ = writeln!(out, "{name}: {n}");
        }
        let _ = writeln!(out, "total: {} ({})", self.total, millions(self.total));
        let _ = writeln!(
            out,
            "alternate_total (attention triple per hook layer): {} ({})",
            self.alternate_total,
            millions(self.alternate_total)
        );
        let _ = writeln!(out, "reference: {} ({})", REFERENCE_TOTAL, millions(REFERENCE_TOTAL));
        let ratio = self.total as f64 / REFERENCE_TOTAL as f64;
        let _ = writeln!(out, "total / reference: {ratio:.4}");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterBank;

    #[test]
    fn hand_tally_at_tiny_scale() {
        let mut c = ModelConfig::tiny();
        c.useformer_depth = 1;
        // useformer 56 + 48 + 76 + 16, oca 80 + 64, projectors 56.
        let audit = count_trainable(&c).unwrap();
        assert_eq!(audit.total, 396);
        assert_eq!(AdapterBank::init(&c).unwrap().trainable_count(), 396);
        assert_eq!(audit.alternate_total, 396 + 48);
    }

    #[test]
    fn clip_scale_total() {
        let audit = count_trainable(&ModelConfig::clip_b16()).unwrap();
        assert_eq!(audit.total, 1_542_400);
        assert_eq!(audit.alternate_total, 2_083_072);
        assert!(audit.report().contains("total: 1542400"));
    }

    #[test]
    fn formula_matches_registry_over_a_grid() {
        for mode in AblationMode::ALL {
            for (rank, depth, mask) in [(1, 1, None), (2, 2, Some(vec![2])), (3, 3, Some(vec![]))] {
                let mut c = ModelConfig::tiny().with_mode(mode);
                c.rank = rank;
                c.useformer_depth = depth;
                c.layer_mask = mask;
                let formula = count_trainable(&c).unwrap();
                assert_eq!(formula.total, AdapterBank::init(&c).unwrap().trainable_count(), "{mode} r={rank}");
            }
        }
    }

    #[test]
    fn oca_terms_grow_linearly_in_rank() {
        let at = |r| {
            let mut c = ModelConfig::toy();
            c.rank = r;
            count_trainable(&c).unwrap().total
        };
        assert_eq!(at(2) - at(1), at(3) - at(2));
        assert!(at(1) < at(2));
        let mut c = ModelConfig::toy();
        c.rank = 0;
        assert!(count_trainable(&c).is_err());
    }
}
