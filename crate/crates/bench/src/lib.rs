//! Fixtures shared by the benchmarks.

use nearl_core::data::{generate, Dataset, DatasetSpec};
use nearl_core::model::{build_variant, NearlModel};
use nearl_core::prompt::PromptSpec;
use nearl_core::{AblationMode, ModelConfig, Tensor};

/// Toy-sized model in `mode` plus one batch of images from the default dataset.
pub fn fixture(mode: AblationMode, batch: usize) -> (NearlModel, Vec<Tensor>) {
    let config = ModelConfig::toy().with_mode(mode);
    let model = build_variant(&config, &PromptSpec::default()).expect("toy config is valid");
    let dataset = dataset(&config);
    let images = dataset.train.iter().take(batch).map(|s| dataset.image(s).expect("sample fits")).collect();
    (model, images)
}

pub fn dataset(config: &ModelConfig) -> Dataset {
    generate(&DatasetSpec::for_model(config)).expect("default spec is valid")
}
