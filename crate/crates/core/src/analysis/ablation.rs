//! Ablation suites: module removal, query depth, adapter rank and hook-layer
//! groups. Every variant trains on the same data with the same seeds.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use crate::config::{AblationMode, ModelConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::build_variant;
use crate::prompt::PromptSpec;
use crate::train::{evaluate, train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Modules,
    Depth,
    Rank,
    LayerGroups,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Modules, Suite::Depth, Suite::Rank, Suite::LayerGroups];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Modules => "modules",
            Suite::Depth => "depth",
            Suite::Rank => "rank",
            Suite::LayerGroups => "layer_groups",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation suite {s:?}")))
    }
}

pub const DEPTH_GRID: [usize; 4] = [1, 2, 4, 6];
pub const RANK_GRID: [usize; 4] = [2, 4, 8, 16];

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: ModelConfig,
}

pub fn suite_variants(base: &ModelConfig, suite: Suite) -> Result<Vec<Variant>> {
    let with = |name: String, f: &dyn Fn(&mut ModelConfig)| {
        let mut config = base.clone();
        f(&mut config);
        config.validate().map(|_| Variant { name, config })
    };
    match suite {
        Suite::Modules => [AblationMode::Lora, AblationMode::NoUseformer, AblationMode::NoOr, AblationMode::Full]
            .into_iter()
            .map(|m| with(m.as_str().to_string(), &|c| c.mode = m))
            .collect(),
        Suite::Depth => DEPTH_GRID
            .into_iter()
            .map(|m| with(format!("M={m}"), &|c| {
                c.mode = AblationMode::Full;
                c.useformer_depth = m;
            }))
            .collect(),
        Suite::Rank => RANK_GRID
            .into_iter()
            .map(|r| with(format!("r={r}"), &|c| {
                c.mode = AblationMode::Full;
                c.rank = r;
            }))
            .collect(),
        Suite::LayerGroups => {
            let l = base.num_layers;
            if !l.is_multiple_of(3) {
                return Err(Error::Config(format!("layer-group suite needs num_layers divisible by 3, got {l}")));
            }
            let third = l / 3;
            let mut out = (0..3)
                .map(|g| {
                    let (lo, hi) = (g * third + 1, (g + 1) * third);
                    with(format!("layers_{lo}-{hi}"), &|c| {
                        c.mode = AblationMode::Full;
                        c.layer_mask = Some((lo..=hi).collect());
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(with("all".into(), &|c| {
                c.mode = AblationMode::Full;
                c.layer_mask = None;
            })?);
            Ok(out)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    /// Test-split metrics of the best-validation weights.
    pub accuracy: f64,
    pub macro_f1: f64,
    pub trainable_params: usize,
    pub seconds: f64,
}

pub fn run_ablations(
    base: &ModelConfig,
    prompts: &PromptSpec,
    dataset: &Dataset,
    tc: &TrainConfig,
    suite: Suite,
) -> Result<Vec<AblationRow>> {
    suite_variants(base, suite)?
        .into_iter()
        .map(|v| {
            let start = Instant::now();
            let mut model = build_variant(&v.config, prompts)?;
            train(&mut model, dataset, tc)?;
            let eval = evaluate(&model, dataset, &dataset.test)?;
            Ok(AblationRow {
                variant: v.name,
                accuracy: eval.metrics.accuracy,
                macro_f1: eval.metrics.macro_f1,
                trainable_params: model.adapters.trainable_count(),
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// CSV with header `variant,acc,f1,trainable_params,seconds`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,acc,f1,trainable_params,seconds\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.6},{},{:.3}", r.variant, r.accuracy, r.macro_f1, r.trainable_params, r.seconds);
    }
    out
}
