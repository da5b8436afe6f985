//! Open-vocabulary attention maps.
//!
//! An attribution prompt is embedded, projected through each block's frozen
//! key projection, and combined with the pixel queries recorded during
//! generation. The resulting per-head attention slices are resized to a
//! common resolution and summed over blocks, steps and heads.

mod export;
mod resize;
mod selection;

use serde::{Deserialize, Serialize};

use crate::backend::{BlockSpec, DenoisingTrace, KeyProjection, QueryArray, TokenEmbeddingMatrix};
use crate::error::{OvamError, Result};
use crate::raster::Map2;

pub use export::{colorize, write_heatmap, HeatmapFileMeta, COLORMAP_STOPS};
pub use resize::{resize_bilinear, BilinearPlan};
pub use selection::{ResolvedSelection, SelectionConfig, TimestepSelection};

/// Projected keys, row-major `[tokens, heads, head_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionKeys {
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub data: Vec<f64>,
}

impl AttributionKeys {
    #[inline]
    pub fn vector(&self, token: usize, head: usize) -> &[f64] {
        let start = (token * self.heads + head) * self.head_dim;
        &self.data[start..start + self.head_dim]
    }
}

/// Attention probabilities, row-major `[pixels, heads, tokens]`; every
/// `(pixel, head)` row sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProbs {
    pub pixels: usize,
    pub heads: usize,
    pub tokens: usize,
    pub data: Vec<f64>,
}

impl AttentionProbs {
    #[inline]
    pub fn get(&self, pixel: usize, head: usize, token: usize) -> f64 {
        self.data[(pixel * self.heads + head) * self.tokens + token]
    }

    #[inline]
    pub fn row(&self, pixel: usize, head: usize) -> &[f64] {
        let start = (pixel * self.heads + head) * self.tokens;
        &self.data[start..start + self.tokens]
    }

    /// The `(head, token)` slice as a spatial map.
    pub fn slice(&self, head: usize, token: usize, width: usize, height: usize) -> Result<Map2> {
        if width * height != self.pixels {
            return Err(OvamError::dim("attention slice", self.pixels, width * height));
        }
        let data = (0..self.pixels).map(|p| self.get(p, head, token)).collect();
        Map2::from_vec(width, height, data)
    }
}

/// `K′ = ℓ_K(X′)`, applied row-wise.
pub fn project_attribution_keys(
    tokens: &TokenEmbeddingMatrix,
    block: &BlockSpec,
    projection: &KeyProjection,
) -> Result<AttributionKeys> {
    if tokens.embed_dim != projection.embed_dim {
        return Err(OvamError::dim(
            "attribution embedding width",
            projection.embed_dim,
            tokens.embed_dim,
        ));
    }
    if projection.heads != block.heads || projection.head_dim != block.head_dim {
        return Err(OvamError::dim(
            "key projection heads/head_dim",
            format!("{}x{}", block.heads, block.head_dim),
            format!("{}x{}", projection.heads, projection.head_dim),
        ));
    }
    let mut data = Vec::with_capacity(tokens.len() * projection.out_dim());
    for k in 0..tokens.len() {
        let x = tokens.row(k);
        for h in 0..projection.heads {
            for c in 0..projection.head_dim {
                let w = projection.row(h, c);
                let mut acc = 0.0;
                for (wi, xi) in w.iter().zip(x) {
                    acc += *wi as f64 * xi;
                }
                data.push(acc);
            }
        }
    }
    Ok(AttributionKeys {
        tokens: tokens.len(),
        heads: projection.heads,
        head_dim: projection.head_dim,
        data,
    })
}

/// Numerically stable softmax in place.
#[inline]
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `softmax(Q K′ᵀ / √d)` over the token axis, per pixel and head.
pub fn attention_matrix(queries: &QueryArray, keys: &AttributionKeys) -> Result<AttentionProbs> {
    if queries.heads != keys.heads || queries.head_dim != keys.head_dim {
        return Err(OvamError::dim(
            "attention heads/head_dim",
            format!("{}x{}", queries.heads, queries.head_dim),
            format!("{}x{}", keys.heads, keys.head_dim),
        ));
    }
    if keys.tokens == 0 {
        return Err(OvamError::InvalidArgument("no attribution tokens".into()));
    }
    if queries.data.iter().any(|v| !v.is_finite()) {
        return Err(OvamError::NonFinite("queries"));
    }
    if keys.data.iter().any(|v| !v.is_finite()) {
        return Err(OvamError::NonFinite("attribution keys"));
    }
    let inv_sqrt_d = 1.0 / (queries.head_dim as f64).sqrt();
    let mut data = vec![0.0; queries.pixels * queries.heads * keys.tokens];
    for p in 0..queries.pixels {
        for h in 0..queries.heads {
            let q = queries.vector(p, h);
            let row_start = (p * queries.heads + h) * keys.tokens;
            let row = &mut data[row_start..row_start + keys.tokens];
            for (k, logit) in row.iter_mut().enumerate() {
                let kv = keys.vector(k, h);
                let mut dot = 0.0;
                for (qi, ki) in q.iter().zip(kv) {
                    dot += *qi as f64 * ki;
                }
                *logit = dot * inv_sqrt_d;
            }
            softmax_in_place(row);
        }
    }
    Ok(AttentionProbs {
        pixels: queries.pixels,
        heads: queries.heads,
        tokens: keys.tokens,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Plain sum over slices; values in `[0, S]`.
    #[default]
    RawSum,
    /// Sum divided by the slice count; values in `[0, 1]`.
    MeanOverSlices,
}

/// One aggregated attribution map per token of `X′`.
#[derive(Debug, Clone, PartialEq)]
pub struct OvamHeatmap {
    pub maps: Vec<Map2>,
    pub labels: Vec<String>,
    pub normalization: Normalization,
    /// Number of aggregated `(block, step, head)` slices.
    pub slices: usize,
}

impl OvamHeatmap {
    pub fn dims(&self) -> (usize, usize) {
        self.maps.first().map_or((0, 0), Map2::dims)
    }

    pub fn map(&self, token: usize) -> Result<&Map2> {
        self.maps.get(token).ok_or_else(|| {
            OvamError::InvalidArgument(format!(
                "token index {token} out of range (have {})",
                self.maps.len()
            ))
        })
    }

    /// Rescales to the requested normalization.
    pub fn normalized(mut self, normalization: Normalization) -> Self {
        if self.normalization != normalization && self.slices > 0 {
            let factor = match normalization {
                Normalization::MeanOverSlices => 1.0 / self.slices as f64,
                Normalization::RawSum => self.slices as f64,
            };
            for m in &mut self.maps {
                m.scale(factor);
            }
            self.normalization = normalization;
        }
        self
    }
}

/// `D_k = Σ_{block, step, head} resize(A_{h,k})`, accumulated in block →
/// step → head order.
pub fn compute_ovam(
    trace: &DenoisingTrace,
    tokens: &TokenEmbeddingMatrix,
    selection: &SelectionConfig,
) -> Result<OvamHeatmap> {
    let resolved = selection.resolve(trace)?;
    let (out_w, out_h) = resolved.output_size;
    let mut maps = vec![Map2::zeros(out_w, out_h); tokens.len()];
    let mut slice = Map2::zeros(out_w, out_h);
    let mut slices = 0;
    for block in &resolved.blocks {
        let dims = block.spatial(trace.latent_w, trace.latent_h);
        let plan = BilinearPlan::new(dims, (out_w, out_h))?;
        let keys = project_attribution_keys(tokens, block, trace.key_projection(&block.id)?)?;
        let heads = resolved.heads_for(block);
        let mut src = vec![0.0; dims.0 * dims.1];
        for &step in &resolved.steps {
            let probs = attention_matrix(trace.query(&block.id, step)?, &keys)?;
            for &h in &heads {
                for (k, acc) in maps.iter_mut().enumerate() {
                    for (p, s) in src.iter_mut().enumerate() {
                        *s = probs.get(p, h, k);
                    }
                    plan.apply_into(&src, &mut slice.data);
                    acc.add_assign(&slice);
                }
                slices += 1;
            }
        }
    }
    let heatmap = OvamHeatmap {
        maps,
        labels: tokens.labels.clone(),
        normalization: Normalization::RawSum,
        slices,
    };
    Ok(heatmap.normalized(selection.normalization))
}
