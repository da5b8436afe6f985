use serde::{Deserialize, Serialize};

use super::Normalization;
use crate::backend::{BlockKind, BlockSpec, DenoisingTrace};
use crate::error::{OvamError, Result};

/// Which denoising steps feed the aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", content = "step", rename_all = "snake_case")]
pub enum TimestepSelection {
    #[default]
    All,
    /// Only `t = T*`.
    Single(usize),
    /// `t ≤ T*`.
    Early(usize),
    /// `t ≥ T*`.
    Late(usize),
}

impl TimestepSelection {
    pub fn accepts(&self, step: usize) -> bool {
        match *self {
            TimestepSelection::All => true,
            TimestepSelection::Single(t) => step == t,
            TimestepSelection::Early(t) => step <= t,
            TimestepSelection::Late(t) => step >= t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Cross blocks to aggregate; `None` selects all of them.
    pub blocks: Option<Vec<String>>,
    pub timesteps: TimestepSelection,
    /// Head indices; `None` selects every head of each block.
    pub heads: Option<Vec<usize>>,
    /// Common resolution `(width, height)`; defaults to the latent size.
    pub output_size: Option<(usize, usize)>,
    pub normalization: Normalization,
}

/// A selection checked against a concrete trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedSelection {
    pub blocks: Vec<BlockSpec>,
    pub steps: Vec<usize>,
    pub heads: Option<Vec<usize>>,
    pub output_size: (usize, usize),
}

impl ResolvedSelection {
    pub fn heads_for(&self, block: &BlockSpec) -> Vec<usize> {
        match &self.heads {
            Some(h) => h.clone(),
            None => (0..block.heads).collect(),
        }
    }

    pub fn slice_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| self.heads_for(b).len() * self.steps.len())
            .sum()
    }
}

impl SelectionConfig {
    pub fn resolve(&self, trace: &DenoisingTrace) -> Result<ResolvedSelection> {
        let blocks: Vec<BlockSpec> = match &self.blocks {
            None => trace.cross_blocks().cloned().collect(),
            Some(ids) => {
                for id in ids {
                    match trace.block(id) {
                        Some(b) if b.kind == BlockKind::Cross => {}
                        Some(_) => {
                            return Err(OvamError::Config(format!(
                                "block `{id}` is not a cross-attention block"
                            )))
                        }
                        None => {
                            return Err(OvamError::Config(format!(
                                "block `{id}` is not in the trace"
                            )))
                        }
                    }
                }
                // Trace order, not request order, fixes the summation order.
                trace
                    .cross_blocks()
                    .filter(|b| ids.contains(&b.id))
                    .cloned()
                    .collect()
            }
        };
        if blocks.is_empty() {
            return Err(OvamError::Config("selection contains no blocks".into()));
        }
        let steps: Vec<usize> = trace
            .timesteps
            .iter()
            .copied()
            .filter(|&t| self.timesteps.accepts(t))
            .collect();
        if steps.is_empty() {
            return Err(OvamError::Config(format!(
                "timestep selection {:?} matches no step of the trace",
                self.timesteps
            )));
        }
        if let Some(heads) = &self.heads {
            if heads.is_empty() {
                return Err(OvamError::Config("selection contains no heads".into()));
            }
            for b in &blocks {
                if let Some(&h) = heads.iter().find(|&&h| h >= b.heads) {
                    return Err(OvamError::Config(format!(
                        "head {h} does not exist in block `{}` ({} heads)",
                        b.id, b.heads
                    )));
                }
            }
        }
        let output_size = self.output_size.unwrap_or((trace.latent_w, trace.latent_h));
        if output_size.0 == 0 || output_size.1 == 0 {
            return Err(OvamError::Config("output size has a zero dimension".into()));
        }
        Ok(ResolvedSelection {
            blocks,
            steps,
            heads: self.heads.clone(),
            output_size,
        })
    }
}
