//! Open-vocabulary attention maps for diffusion models.
//!
//! Attribution heatmaps for arbitrary token sequences computed from a recorded
//! denoising trace, attribution-token optimization against annotated masks,
//! pseudo-mask extraction, synthetic segmentation dataset generation and mIoU
//! evaluation.

pub mod backend;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod mask;
pub mod optimizer;
pub mod ovam;
pub mod raster;

pub use backend::{
    BlockKind, BlockSpec, Denoiser, DenoisingTrace, KeyProjection, QueryArray, SelfAttention,
    TokenEmbeddingMatrix, ToyDenoiser,
};
pub use dataset::{DatasetManifest, ManifestEntry, PromptSource};
pub use error::{OvamError, Result};
pub use eval::{evaluate_dataset, iou, EvalReport};
pub use mask::{
    binarize, fuse_self_attention, make_pseudo_mask, BinarizationParams, BinaryMask, CrfParams,
    Refiner,
};
pub use optimizer::{
    init_attribution_tokens, optimize_tokens, GroundTruthMask, OptimizationResult, OptimizerConfig,
    TrainingPair,
};
pub use ovam::{
    attention_matrix, compute_ovam, project_attribution_keys, AttentionProbs, AttributionKeys,
    Normalization, OvamHeatmap, SelectionConfig, TimestepSelection,
};
pub use raster::{BoolGrid, Map2};
