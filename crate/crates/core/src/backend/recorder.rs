use std::collections::BTreeMap;

use image::RgbImage;

use super::{
    BlockKind, BlockSpec, DenoisingTrace, KeyProjection, QueryArray, SelfAttention, StepKey,
};
use crate::error::{OvamError, Result};
use crate::ovam::AttentionProbs;

/// Receives attention internals while a backend denoises.
pub trait CaptureHook {
    fn on_cross_queries(&mut self, _block: &BlockSpec, _step: usize, _queries: &QueryArray) {}

    /// Synthesis-time cross-attention probabilities `softmax(QKᵀ/√d)`.
    fn on_cross_attention(&mut self, _block: &BlockSpec, _step: usize, _probs: &AttentionProbs) {}

    fn on_self_attention(&mut self, _block: &BlockSpec, _step: usize, _probs: &SelfAttention) {}
}

/// Collects synthesis-time cross-attention, for comparing against
/// post-hoc attribution.
#[derive(Debug, Default)]
pub struct CrossAttentionCapture {
    pub maps: BTreeMap<StepKey, AttentionProbs>,
}

impl CaptureHook for CrossAttentionCapture {
    fn on_cross_attention(&mut self, block: &BlockSpec, step: usize, probs: &AttentionProbs) {
        self.maps.insert((block.id.clone(), step), probs.clone());
    }
}

/// Builds a [`DenoisingTrace`] from hook callbacks.
#[derive(Debug)]
pub struct TraceRecorder {
    backend_id: String,
    latent_w: usize,
    latent_h: usize,
    embed_dim: usize,
    blocks: Vec<BlockSpec>,
    timesteps: Vec<usize>,
    queries: BTreeMap<StepKey, QueryArray>,
    key_weights: BTreeMap<String, KeyProjection>,
    self_attn: BTreeMap<StepKey, SelfAttention>,
    seed: u64,
    prompt: String,
    guidance_branch: String,
}

impl TraceRecorder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        backend_id: &str,
        latent_w: usize,
        latent_h: usize,
        embed_dim: usize,
        blocks: Vec<BlockSpec>,
        timesteps: Vec<usize>,
        seed: u64,
        prompt: &str,
        guidance_branch: &str,
    ) -> Self {
        TraceRecorder {
            backend_id: backend_id.to_string(),
            latent_w,
            latent_h,
            embed_dim,
            blocks,
            timesteps,
            queries: BTreeMap::new(),
            key_weights: BTreeMap::new(),
            self_attn: BTreeMap::new(),
            seed,
            prompt: prompt.to_string(),
            guidance_branch: guidance_branch.to_string(),
        }
    }

    pub fn set_key_projection(&mut self, block: &str, projection: KeyProjection) {
        self.key_weights.insert(block.to_string(), projection);
    }

    /// Validates completeness and freezes the trace.
    pub fn finish(self, image: RgbImage) -> Result<DenoisingTrace> {
        for block in self.blocks.iter().filter(|b| b.kind == BlockKind::Cross) {
            if !self.key_weights.contains_key(&block.id) {
                return Err(OvamError::PartialTrace {
                    what: "key projection",
                    block: block.id.clone(),
                    step: 0,
                });
            }
            for &t in &self.timesteps {
                if !self.queries.contains_key(&(block.id.clone(), t)) {
                    return Err(OvamError::PartialTrace {
                        what: "queries",
                        block: block.id.clone(),
                        step: t,
                    });
                }
            }
        }
        let trace = DenoisingTrace {
            backend_id: self.backend_id,
            latent_w: self.latent_w,
            latent_h: self.latent_h,
            embed_dim: self.embed_dim,
            blocks: self.blocks,
            timesteps: self.timesteps,
            queries: self.queries,
            key_weights: self.key_weights,
            self_attn: self.self_attn,
            image,
            seed: self.seed,
            prompt: self.prompt,
            guidance_branch: self.guidance_branch,
        };
        trace.validate()?;
        Ok(trace)
    }
}

impl CaptureHook for TraceRecorder {
    fn on_cross_queries(&mut self, block: &BlockSpec, step: usize, queries: &QueryArray) {
        self.queries
            .insert((block.id.clone(), step), queries.clone());
    }

    fn on_self_attention(&mut self, block: &BlockSpec, step: usize, probs: &SelfAttention) {
        // Only full-resolution self-attention is kept.
        if block.reduction == 1 {
            self.self_attn
                .insert((block.id.clone(), step), probs.clone());
        }
    }
}
