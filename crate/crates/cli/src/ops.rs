//! Operations shared by the commands and the HTTP handlers, so both surfaces
//! produce the same bytes for the same inputs.

use std::path::Path;

use ovam_core::backend::Denoiser;
use ovam_core::mask::{make_pseudo_mask_with, BinarizationParams, BinaryMask, Refiner};
use ovam_core::optimizer::read_token_file;
use ovam_core::ovam::{compute_ovam, OvamHeatmap, SelectionConfig};
use ovam_core::raster::Map2;
use ovam_core::{binarize, DenoisingTrace, OvamError, Result, TokenEmbeddingMatrix};
use serde::{Deserialize, Serialize};

use crate::config::MaskDefaults;

/// Plain text tokens or a trained token file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Natural,
    Optimized,
}

/// An attribution prompt resolved to embedding rows plus the row of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedTokens {
    pub tokens: TokenEmbeddingMatrix,
    pub index: usize,
    pub kind: TokenKind,
}

impl ResolvedTokens {
    /// Text prompt; the default row is the last word before the end marker.
    pub fn from_prompt(backend: &dyn Denoiser, prompt: &str, index: Option<usize>) -> Result<Self> {
        let tokens = backend.encode_text(prompt)?;
        if tokens.len() < 3 {
            return Err(OvamError::InvalidArgument(format!(
                "attribution prompt `{prompt}` has no words"
            )));
        }
        let index = index.unwrap_or(tokens.len() - 2);
        Self::checked(tokens, index, TokenKind::Natural)
    }

    /// Token file directory; the default row is the last (the class).
    pub fn from_token_file(dir: &Path, index: Option<usize>) -> Result<Self> {
        let (tokens, _) = read_token_file(dir)?;
        let index = index.unwrap_or(tokens.len().saturating_sub(1));
        Self::checked(tokens, index, TokenKind::Optimized)
    }

    fn checked(tokens: TokenEmbeddingMatrix, index: usize, kind: TokenKind) -> Result<Self> {
        if index >= tokens.len() {
            return Err(OvamError::InvalidArgument(format!(
                "token index {index} out of range for {} tokens",
                tokens.len()
            )));
        }
        Ok(ResolvedTokens {
            tokens,
            index,
            kind,
        })
    }

    pub fn label(&self) -> &str {
        &self.tokens.labels[self.index]
    }

    pub fn defaults(&self, d: &MaskDefaults) -> BinarizationParams {
        match self.kind {
            TokenKind::Natural => d.natural,
            TokenKind::Optimized => d.optimized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapStats {
    pub max: f64,
    /// Fraction of pixels at or above `tau · max`.
    pub area_at_tau: f64,
    pub tau: f64,
}

pub fn heatmap(
    trace: &DenoisingTrace,
    tokens: &ResolvedTokens,
    selection: &SelectionConfig,
) -> Result<(Map2, OvamHeatmap)> {
    let hm = compute_ovam(trace, &tokens.tokens, selection)?;
    Ok((hm.map(tokens.index)?.clone(), hm))
}

pub fn heatmap_stats(map: &Map2, tau: f64) -> Result<HeatmapStats> {
    Ok(HeatmapStats {
        max: map.max(),
        area_at_tau: binarize(map, None, tau)?.area_fraction(),
        tau,
    })
}

pub fn mask(
    trace: &DenoisingTrace,
    tokens: &ResolvedTokens,
    params: &BinarizationParams,
    selection: &SelectionConfig,
    refiner: &dyn Refiner,
) -> Result<BinaryMask> {
    make_pseudo_mask_with(trace, &tokens.tokens, tokens.index, params, selection, refiner)
}
