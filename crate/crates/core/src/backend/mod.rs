//! Denoiser capture contract.
//!
//! A backend runs text-conditioned denoising and reports, through a
//! [`CaptureHook`], the pixel queries of every cross-attention block, the
//! key projections of those blocks and the full-resolution self-attention
//! probabilities. [`TraceRecorder`] assembles those reports into an immutable
//! [`DenoisingTrace`], which is all the attribution code ever needs: keys for
//! new prompts are projected after the fact, so no model has to be resident.
//!
//! Adapters for a real latent-diffusion UNet implement [`Denoiser`] by
//! installing attention processors that forward to the hook:
//!
//! * every cross-attention layer reports `Q` after its query projection
//!   (shape `[pixels, heads, head_dim]`, before the scaled dot product);
//! * the layer's `to_k` weight is reported once through
//!   [`TraceRecorder::set_key_projection`] (no bias, as in the reference UNet);
//! * self-attention layers whose spatial size equals the latent size report
//!   their softmax output; lower-resolution self-attention is dropped.
//!
//! With classifier-free guidance the UNet evaluates a conditional and an
//! unconditional branch per step. Adapters must pick one and record it in
//! [`DenoisingTrace::guidance_branch`]; the toy backend has no guidance and
//! records `"conditional"`.

mod prng;
mod recorder;
mod toy;
pub mod trace_io;

use std::collections::BTreeMap;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{OvamError, Result};

pub use prng::{fnv1a64, splitmix64, Stream};
pub use recorder::{CaptureHook, CrossAttentionCapture, TraceRecorder};
pub use toy::{toy_denoiser_spec, ToyDenoiser, ToySpec, TOY_BACKEND_ID};

/// Display label of the start-of-text token.
pub const SOT_LABEL: &str = "<|startoftext|>";
/// Display label of the end-of-text token.
pub const EOT_LABEL: &str = "<|endoftext|>";

/// Environment variable overriding the configured backend id.
pub const BACKEND_ENV: &str = "OVAM_BACKEND";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Cross,
    #[serde(rename = "self")]
    SelfAttn,
}

/// One attention block of the denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub id: String,
    /// Latent side divided by this factor (rounded up) gives the block side.
    pub reduction: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub kind: BlockKind,
}

impl BlockSpec {
    pub fn new(
        id: impl Into<String>,
        reduction: usize,
        heads: usize,
        head_dim: usize,
        kind: BlockKind,
    ) -> Self {
        BlockSpec {
            id: id.into(),
            reduction,
            heads,
            head_dim,
            kind,
        }
    }

    /// `(⌈W/r⌉, ⌈H/r⌉)`.
    pub fn spatial(&self, latent_w: usize, latent_h: usize) -> (usize, usize) {
        (
            latent_w.div_ceil(self.reduction),
            latent_h.div_ceil(self.reduction),
        )
    }

    pub fn pixels(&self, latent_w: usize, latent_h: usize) -> usize {
        let (w, h) = self.spatial(latent_w, latent_h);
        w * h
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(OvamError::InvalidArgument(format!(
                "block `{}` needs positive reduction, heads and head_dim",
                self.id
            )));
        }
        if self.id.is_empty() || self.id.contains(['/', '\\', '.']) {
            return Err(OvamError::InvalidArgument(format!(
                "block id `{}` is not a plain identifier",
                self.id
            )));
        }
        Ok(())
    }
}

/// Row-major `[n_pixels, heads, head_dim]` query tensor of one block and step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryArray {
    pub pixels: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub data: Vec<f32>,
}

impl QueryArray {
    pub fn new(pixels: usize, heads: usize, head_dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != pixels * heads * head_dim {
            return Err(OvamError::dim(
                "query array",
                pixels * heads * head_dim,
                data.len(),
            ));
        }
        Ok(QueryArray {
            pixels,
            heads,
            head_dim,
            data,
        })
    }

    #[inline]
    pub fn vector(&self, pixel: usize, head: usize) -> &[f32] {
        let start = (pixel * self.heads + head) * self.head_dim;
        &self.data[start..start + self.head_dim]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.pixels, self.heads, self.head_dim]
    }
}

/// Linear key projection `ℓ_K`: an `l_E` vector to `[heads, head_dim]`.
///
/// Stored as a row-major `[heads * head_dim, l_E]` matrix without bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyProjection {
    pub heads: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
    pub weights: Vec<f32>,
}

impl KeyProjection {
    pub fn new(heads: usize, head_dim: usize, embed_dim: usize, weights: Vec<f32>) -> Result<Self> {
        if weights.len() != heads * head_dim * embed_dim {
            return Err(OvamError::dim(
                "key projection",
                heads * head_dim * embed_dim,
                weights.len(),
            ));
        }
        Ok(KeyProjection {
            heads,
            head_dim,
            embed_dim,
            weights,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Weight row for output coordinate `(head, c)`.
    #[inline]
    pub fn row(&self, head: usize, c: usize) -> &[f32] {
        let r = head * self.head_dim + c;
        &self.weights[r * self.embed_dim..(r + 1) * self.embed_dim]
    }
}

/// Row-stochastic self-attention probabilities, `[pixels, pixels, heads]`
/// (query pixel, key pixel, head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfAttention {
    pub pixels: usize,
    pub heads: usize,
    pub data: Vec<f32>,
}

impl SelfAttention {
    pub fn new(pixels: usize, heads: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != pixels * pixels * heads {
            return Err(OvamError::dim(
                "self-attention array",
                pixels * pixels * heads,
                data.len(),
            ));
        }
        Ok(SelfAttention {
            pixels,
            heads,
            data,
        })
    }

    #[inline]
    pub fn prob(&self, query: usize, key: usize, head: usize) -> f32 {
        self.data[(query * self.pixels + key) * self.heads + head]
    }

    /// Largest deviation of any `(query, head)` row sum from one.
    pub fn max_row_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for q in 0..self.pixels {
            for h in 0..self.heads {
                let s: f64 = (0..self.pixels).map(|k| self.prob(q, k, h) as f64).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

/// Text embedding, one `l_E` row per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbeddingMatrix {
    pub embed_dim: usize,
    pub data: Vec<f64>,
    pub labels: Vec<String>,
}

impl TokenEmbeddingMatrix {
    pub fn new(embed_dim: usize, data: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        if embed_dim == 0 || data.len() != embed_dim * labels.len() {
            return Err(OvamError::dim(
                "token embedding",
                embed_dim * labels.len(),
                data.len(),
            ));
        }
        if labels.is_empty() {
            return Err(OvamError::InvalidArgument(
                "token embedding needs at least one row".into(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(OvamError::NonFinite("token embedding"));
        }
        Ok(TokenEmbeddingMatrix {
            embed_dim,
            data,
            labels,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) || rows.len() != labels.len() {
            return Err(OvamError::InvalidArgument(
                "token rows must share width and match labels".into(),
            ));
        }
        TokenEmbeddingMatrix::new(dim, rows.concat(), labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.embed_dim..(k + 1) * self.embed_dim]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.embed_dim..(k + 1) * self.embed_dim]
    }

    /// Sub-matrix with the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * self.embed_dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &k in rows {
            if k >= self.len() {
                return Err(OvamError::InvalidArgument(format!(
                    "token index {k} out of range (have {})",
                    self.len()
                )));
            }
            data.extend_from_slice(self.row(k));
            labels.push(self.labels[k].clone());
        }
        TokenEmbeddingMatrix::new(self.embed_dim, data, labels)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub type StepKey = (String, usize);

/// Everything captured from one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisingTrace {
    pub backend_id: String,
    pub latent_w: usize,
    pub latent_h: usize,
    pub embed_dim: usize,
    pub blocks: Vec<BlockSpec>,
    /// Ordered denoising step indices.
    pub timesteps: Vec<usize>,
    pub queries: BTreeMap<StepKey, QueryArray>,
    pub key_weights: BTreeMap<String, KeyProjection>,
    pub self_attn: BTreeMap<StepKey, SelfAttention>,
    pub image: RgbImage,
    pub seed: u64,
    pub prompt: String,
    pub guidance_branch: String,
}

impl DenoisingTrace {
    pub fn block(&self, id: &str) -> Option<&BlockSpec> {
        self.blocks.iter().find(|b| b.id == id)
    }

    pub fn cross_blocks(&self) -> impl Iterator<Item = &BlockSpec> {
        self.blocks.iter().filter(|b| b.kind == BlockKind::Cross)
    }

    pub fn self_blocks(&self) -> impl Iterator<Item = &BlockSpec> {
        self.blocks.iter().filter(|b| b.kind == BlockKind::SelfAttn)
    }

    pub fn query(&self, block: &str, step: usize) -> Result<&QueryArray> {
        self.queries
            .get(&(block.to_string(), step))
            .ok_or_else(|| OvamError::PartialTrace {
                what: "queries",
                block: block.to_string(),
                step,
            })
    }

    pub fn key_projection(&self, block: &str) -> Result<&KeyProjection> {
        self.key_weights
            .get(block)
            .ok_or_else(|| OvamError::PartialTrace {
                what: "key projection",
                block: block.to_string(),
                step: 0,
            })
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.image.width() as usize, self.image.height() as usize)
    }

    /// Checks every structural invariant of a trace.
    pub fn validate(&self) -> Result<()> {
        if self.latent_w == 0 || self.latent_h == 0 {
            return Err(OvamError::InvalidArgument("latent dims must be positive".into()));
        }
        if self.timesteps.is_empty() {
            return Err(OvamError::InvalidArgument("trace has no timesteps".into()));
        }
        for block in &self.blocks {
            block.validate()?;
            match block.kind {
                BlockKind::Cross => {
                    let kp = self.key_projection(&block.id)?;
                    if kp.heads != block.heads
                        || kp.head_dim != block.head_dim
                        || kp.embed_dim != self.embed_dim
                    {
                        return Err(OvamError::dim(
                            "key projection shape",
                            format!("[{}, {}, {}]", block.heads, block.head_dim, self.embed_dim),
                            format!("[{}, {}, {}]", kp.heads, kp.head_dim, kp.embed_dim),
                        ));
                    }
                    let pixels = block.pixels(self.latent_w, self.latent_h);
                    for &t in &self.timesteps {
                        let q = self.query(&block.id, t)?;
                        if q.shape() != [pixels, block.heads, block.head_dim] {
                            return Err(OvamError::dim(
                                "query shape",
                                format!("{:?}", [pixels, block.heads, block.head_dim]),
                                format!("{:?}", q.shape()),
                            ));
                        }
                    }
                }
                BlockKind::SelfAttn => {
                    if block.reduction != 1 {
                        if self.self_attn.keys().any(|(b, _)| b == &block.id) {
                            return Err(OvamError::InvalidArgument(format!(
                                "self-attention stored for reduced block `{}`",
                                block.id
                            )));
                        }
                        continue;
                    }
                    let pixels = self.latent_w * self.latent_h;
                    for &t in &self.timesteps {
                        let sa = self.self_attn.get(&(block.id.clone(), t)).ok_or_else(|| {
                            OvamError::PartialTrace {
                                what: "self-attention",
                                block: block.id.clone(),
                                step: t,
                            }
                        })?;
                        if sa.pixels != pixels || sa.heads != block.heads {
                            return Err(OvamError::dim(
                                "self-attention shape",
                                format!("[{pixels}, {pixels}, {}]", block.heads),
                                format!("[{}, {}, {}]", sa.pixels, sa.pixels, sa.heads),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// A text-to-image denoiser that can report its attention internals.
pub trait Denoiser: Send + Sync {
    fn id(&self) -> &str;

    fn embed_dim(&self) -> usize;

    fn max_tokens(&self) -> usize;

    /// Tokenizer labels, including the start and end markers.
    fn tokenize(&self, prompt: &str) -> Result<Vec<String>>;

    /// One embedding row per token, including start and end markers.
    fn encode_text(&self, prompt: &str) -> Result<TokenEmbeddingMatrix>;

    /// Runs generation, reporting internals to `hook` as well as recording the
    /// returned trace.
    fn generate_with_hook(
        &self,
        prompt: &str,
        seed: u64,
        num_timesteps: usize,
        hook: Option<&mut dyn CaptureHook>,
    ) -> Result<DenoisingTrace>;

    fn generate_with_trace(
        &self,
        prompt: &str,
        seed: u64,
        num_timesteps: usize,
    ) -> Result<DenoisingTrace> {
        self.generate_with_hook(prompt, seed, num_timesteps, None)
    }
}

/// Resolves a backend id. `OVAM_BACKEND` takes precedence over `configured`.
pub fn load_backend(configured: &str) -> Result<Arc<dyn Denoiser>> {
    let id = std::env::var(BACKEND_ENV).unwrap_or_else(|_| configured.to_string());
    backend_by_id(&id)
}

pub fn backend_by_id(id: &str) -> Result<Arc<dyn Denoiser>> {
    match id {
        TOY_BACKEND_ID => Ok(Arc::new(ToyDenoiser::new())),
        other => Err(OvamError::BackendUnavailable(other.to_string())),
    }
}
