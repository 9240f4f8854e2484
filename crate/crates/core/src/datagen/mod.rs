//! Paired multi-illumination training data.
//!
//! The toy renderer produces scenes with exact ground truth under any
//! lighting condition; the variational encoder trains against any
//! [`variational::FrozenGenerator`]; [`filter`] scores images against quality
//! prompts through a pluggable embedder; [`dataset::ingest_miiw`] indexes
//! captured multi-illumination scenes.

pub mod dataset;
pub mod filter;
pub mod render;
pub mod variational;

pub use dataset::{build_paired_dataset, ingest_miiw, DatasetManifest, ManifestRecord, SceneGroup};
pub use filter::{filter_by_similarity, BrightnessEmbedder, Embedder};
pub use render::{render_toy, LightingParams, Luminaire, ToyScene};
pub use variational::{
    generate_relit_variants, kl_divergence, train_variational_encoder, FrozenGenerator, GradientPerceptual,
    ToyGenerator, VaeConfig, VariationalEncoder,
};
