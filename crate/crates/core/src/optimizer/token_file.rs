//! Optimized-token container: `token.json` plus `token.f32`.
//!
//! `token.f32` holds the embedding rows as raw little-endian float32,
//! row-major `[rows, l_E]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizationResult, OptimizerConfig};
use crate::backend::TokenEmbeddingMatrix;
use crate::error::{OvamError, Result};

pub const TOKEN_META_FILE: &str = "token.json";
pub const TOKEN_DATA_FILE: &str = "token.f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub pairs: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFileMeta {
    pub label: String,
    pub embed_dim: usize,
    pub rows: usize,
    pub row_labels: Vec<String>,
    pub backend_id: String,
    pub best_loss: f64,
    pub training: TrainingMeta,
    pub dtype: String,
    pub endianness: String,
}

impl TokenFileMeta {
    pub fn from_result(
        label: &str,
        backend_id: &str,
        result: &OptimizationResult,
        cfg: &OptimizerConfig,
        pairs: usize,
    ) -> Self {
        let t = &result.best_tokens;
        TokenFileMeta {
            label: label.to_string(),
            embed_dim: t.embed_dim,
            rows: t.len(),
            row_labels: t.labels.clone(),
            backend_id: backend_id.to_string(),
            best_loss: result.best_loss,
            training: TrainingMeta {
                pairs,
                epochs: result.loss_history.len(),
                best_epoch: result.best_epoch,
                learning_rate: cfg.learning_rate,
                decay_factor: cfg.decay_factor,
                decay_every: cfg.decay_every,
            },
            dtype: "float32".into(),
            endianness: "little".into(),
        }
    }
}

pub fn write_token_file(dir: &Path, tokens: &TokenEmbeddingMatrix, meta: &TokenFileMeta) -> Result<()> {
    if meta.rows != tokens.len() || meta.embed_dim != tokens.embed_dim {
        return Err(OvamError::dim(
            "token file metadata",
            format!("{}x{}", tokens.len(), tokens.embed_dim),
            format!("{}x{}", meta.rows, meta.embed_dim),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| OvamError::io(dir, e))?;
    let mut bytes = Vec::with_capacity(tokens.data.len() * 4);
    for v in &tokens.data {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let data_path = dir.join(TOKEN_DATA_FILE);
    std::fs::write(&data_path, bytes).map_err(|e| OvamError::io(&data_path, e))?;
    let meta_path = dir.join(TOKEN_META_FILE);
    std::fs::write(&meta_path, serde_json::to_vec_pretty(meta)?)
        .map_err(|e| OvamError::io(&meta_path, e))?;
    Ok(())
}

pub fn read_token_file(dir: &Path) -> Result<(TokenEmbeddingMatrix, TokenFileMeta)> {
    let meta_path = dir.join(TOKEN_META_FILE);
    let raw = std::fs::read(&meta_path).map_err(|e| OvamError::io(&meta_path, e))?;
    let meta: TokenFileMeta = serde_json::from_slice(&raw)?;
    let data_path = dir.join(TOKEN_DATA_FILE);
    let bytes = std::fs::read(&data_path).map_err(|e| OvamError::io(&data_path, e))?;
    if bytes.len() != meta.rows * meta.embed_dim * 4 {
        return Err(OvamError::Format {
            path: data_path,
            message: format!(
                "expected {}x{} float32 values, found {} bytes",
                meta.rows,
                meta.embed_dim,
                bytes.len()
            ),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut labels = meta.row_labels.clone();
    labels.resize(meta.rows, String::new());
    let tokens = TokenEmbeddingMatrix::new(meta.embed_dim, data, labels)?;
    Ok((tokens, meta))
}
