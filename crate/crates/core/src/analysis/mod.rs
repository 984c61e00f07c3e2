//! Verification instruments: parameter audit, feature-space statistics and
//! ablation sweeps.

pub mod ablation;
pub mod audit;
pub mod cosine;
pub mod pca;

pub use ablation::{ablation_csv, run_ablations, suite_variants, AblationRow, Suite, Variant};
pub use audit::{count_trainable, ParamAudit};
pub use cosine::{cosine_stats, CosineReport};
pub use pca::{pca2, Pca2};
