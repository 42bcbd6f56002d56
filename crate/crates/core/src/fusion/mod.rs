//! Feature equalization fusion.
//!
//! Encoder features are reorganized into a texture branch (blocks 1-3) and a structure branch
//! (blocks 4-5), each branch gets a three-stream multi-scale representation, the K images of a
//! task are fused position-by-position against a randomly chosen base image, and the fused
//! branches are merged into one equalized feature map that is resampled for every decoder skip.

mod equalization;
mod local;
mod multiscale;
mod plan;
mod similarity;

pub use equalization::{
    BranchFeatures, EqualizedFeatures, Equalizer, FeatureEqualizationFusion, FeaturePyramid,
    Reorganize, SemanticFusion, PYRAMID_LEVELS, STRUCTURE_LEVELS, TEXTURE_LEVELS,
};
pub use local::{local_fuse, local_fuse_with_matches};
pub use multiscale::{MultiScale, STREAM_DEPTH, STREAM_KERNELS};
pub use plan::FusionPlan;
pub use similarity::{best_matches, cosine_similarity_map, similarity_map, SimilarityMap, SIMILARITY_EPS};
