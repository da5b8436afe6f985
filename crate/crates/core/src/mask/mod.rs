//! Heatmap to binary pseudo-mask.
//!
//! Pipeline order, fixed: attribution map of token `k` (latent resolution)
//! → optional product with the self-attention map rescaled to `[α, 1]` →
//! bilinear upscale of that product to image resolution → threshold at
//! `τ · max` → optional refinement. With `threshold_at_latent` the threshold
//! is applied before a nearest-neighbour upscale instead.

mod crf;
mod refine;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{DenoisingTrace, TokenEmbeddingMatrix};
use crate::error::{OvamError, Result};
use crate::ovam::{compute_ovam, resize_bilinear, SelectionConfig};
use crate::raster::{BoolGrid, Map2};

pub use crf::{dense_crf, CrfParams};
pub use refine::{
    refiner_for, DenseCrfRefiner, ExternalRefiner, IdentityRefiner, Refiner, RefinerConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinarizationParams {
    pub tau: f64,
    pub alpha: f64,
    pub use_self_attention: bool,
    pub use_crf: bool,
    pub threshold_at_latent: bool,
}

impl Default for BinarizationParams {
    fn default() -> Self {
        Self::non_optimized()
    }
}

impl BinarizationParams {
    /// τ = 0.4, α = 0.85: plain-text tokens.
    pub fn non_optimized() -> Self {
        BinarizationParams {
            tau: 0.4,
            alpha: 0.85,
            use_self_attention: true,
            use_crf: true,
            threshold_at_latent: false,
        }
    }

    /// τ = 0.8, α = 0.95: optimized tokens.
    pub fn optimized() -> Self {
        BinarizationParams {
            tau: 0.8,
            alpha: 0.95,
            ..Self::non_optimized()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau", self.tau), ("alpha", self.alpha)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(OvamError::InvalidArgument(format!(
                    "{name} = {v} must lie in (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub grid: BoolGrid,
    pub class_label: String,
    pub area_fraction: f64,
}

impl BinaryMask {
    pub fn new(grid: BoolGrid, class_label: impl Into<String>) -> Self {
        let area_fraction = grid.area_fraction();
        BinaryMask {
            grid,
            class_label: class_label.into(),
            area_fraction,
        }
    }
}

/// JSON sidecar stored next to each mask PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub class: String,
    pub tau: f64,
    pub alpha: f64,
    pub self_attention: bool,
    pub crf: bool,
    pub area_fraction: f64,
    pub width: usize,
    pub height: usize,
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// Writes the 0/255 PNG and its sidecar.
pub fn write_mask(png: &Path, mask: &BinaryMask, params: &BinarizationParams) -> Result<()> {
    mask.grid.save_png(png)?;
    let sidecar = MaskSidecar {
        class: mask.class_label.clone(),
        tau: params.tau,
        alpha: params.alpha,
        self_attention: params.use_self_attention,
        crf: params.use_crf,
        area_fraction: mask.area_fraction,
        width: mask.grid.width,
        height: mask.grid.height,
    };
    let path = sidecar_path(png);
    std::fs::write(&path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| OvamError::io(&path, e))
}

/// Column sums of every full-resolution self-attention map, summed over
/// heads and stored steps, min-max rescaled to `[alpha, 1]`.
pub fn fuse_self_attention(trace: &DenoisingTrace, alpha: f64) -> Result<Map2> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(OvamError::InvalidArgument(format!(
            "alpha = {alpha} must lie in (0, 1]"
        )));
    }
    let (w, h) = (trace.latent_w, trace.latent_h);
    let mut raw = Map2::zeros(w, h);
    let mut found = false;
    for block in trace.self_blocks().filter(|b| b.reduction == 1) {
        for &t in &trace.timesteps {
            let Some(sa) = trace.self_attn.get(&(block.id.clone(), t)) else {
                continue;
            };
            if sa.pixels != w * h {
                return Err(OvamError::dim("self-attention pixels", w * h, sa.pixels));
            }
            found = true;
            for q in 0..sa.pixels {
                let row = &sa.data[q * sa.pixels * sa.heads..(q + 1) * sa.pixels * sa.heads];
                for (k, probs) in row.chunks_exact(sa.heads).enumerate() {
                    for p in probs {
                        raw.data[k] += *p as f64;
                    }
                }
            }
        }
    }
    if !found {
        return Err(OvamError::Config(
            "trace holds no full-resolution self-attention".into(),
        ));
    }
    Ok(rescale(&raw, alpha))
}

/// Linear map of `[min, max]` onto `[alpha, 1]`; a constant map becomes ones.
pub fn rescale(map: &Map2, alpha: f64) -> Map2 {
    let (lo, hi) = (map.min(), map.max());
    if hi <= lo {
        return Map2::filled(map.width, map.height, 1.0);
    }
    let mut out = map.clone();
    for v in &mut out.data {
        *v = if *v == hi {
            1.0
        } else {
            alpha + (1.0 - alpha) * (*v - lo) / (hi - lo)
        };
    }
    out
}

/// `combined ≥ τ · max(combined)`, where `combined` is `d ⊙ a_alpha` when a
/// self-attention map is given. A map whose maximum is not positive yields an
/// empty mask.
pub fn binarize(d: &Map2, a_alpha: Option<&Map2>, tau: f64) -> Result<BoolGrid> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(OvamError::InvalidArgument(format!(
            "tau = {tau} must lie in (0, 1]"
        )));
    }
    let combined = match a_alpha {
        Some(a) => d.hadamard(a)?,
        None => d.clone(),
    };
    Ok(threshold(&combined, tau))
}

fn threshold(map: &Map2, tau: f64) -> BoolGrid {
    let m = map.max();
    let data = if m > 0.0 {
        let cut = tau * m;
        map.data.iter().map(|v| *v >= cut).collect()
    } else {
        vec![false; map.data.len()]
    };
    BoolGrid {
        width: map.width,
        height: map.height,
        data,
    }
}

/// Attribution map of token `k` times the fused self-attention (if enabled),
/// at latent resolution.
pub fn combined_map(
    trace: &DenoisingTrace,
    tokens: &TokenEmbeddingMatrix,
    k: usize,
    params: &BinarizationParams,
    selection: &SelectionConfig,
) -> Result<Map2> {
    if k >= tokens.len() {
        return Err(OvamError::InvalidArgument(format!(
            "token index {k} out of range for {} tokens",
            tokens.len()
        )));
    }
    let selection = SelectionConfig {
        output_size: None,
        ..selection.clone()
    };
    let heatmap = compute_ovam(trace, tokens, &selection)?;
    let d = heatmap.maps[k].clone();
    if params.use_self_attention {
        d.hadamard(&fuse_self_attention(trace, params.alpha)?)
    } else {
        Ok(d)
    }
}

pub fn make_pseudo_mask(
    trace: &DenoisingTrace,
    tokens: &TokenEmbeddingMatrix,
    k: usize,
    params: &BinarizationParams,
    refiner: &dyn Refiner,
) -> Result<BinaryMask> {
    make_pseudo_mask_with(trace, tokens, k, params, &SelectionConfig::default(), refiner)
}

pub fn make_pseudo_mask_with(
    trace: &DenoisingTrace,
    tokens: &TokenEmbeddingMatrix,
    k: usize,
    params: &BinarizationParams,
    selection: &SelectionConfig,
    refiner: &dyn Refiner,
) -> Result<BinaryMask> {
    params.validate()?;
    let combined = combined_map(trace, tokens, k, params, selection)?;
    let (iw, ih) = trace.image_dims();
    let mut grid = if params.threshold_at_latent {
        threshold(&combined, params.tau).resize_nearest(iw, ih)
    } else {
        threshold(&resize_bilinear(&combined, iw, ih)?, params.tau)
    };
    if params.use_crf {
        grid = refiner.refine(&trace.image, &grid)?;
    }
    Ok(BinaryMask::new(grid, tokens.labels[k].clone()))
}
