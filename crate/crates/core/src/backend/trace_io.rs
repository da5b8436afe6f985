//! On-disk trace container.
//!
//! A directory holding `trace.json` (metadata and array index), one raw
//! little-endian float32 file per array and the decoded `image.png`:
//!
//! * `q_<block>_<t>.f32` — queries, `[pixels, heads, head_dim]`
//! * `kw_<block>.f32` — key projection, `[heads · head_dim, l_E]`
//! * `sa_<block>_<t>.f32` — self-attention, `[pixels, pixels, heads]`
//!
//! Arrays are row-major; their dims are listed in `trace.json`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BlockSpec, DenoisingTrace, KeyProjection, QueryArray, SelfAttention};
use crate::error::{OvamError, Result};

pub const TRACE_FORMAT_VERSION: u32 = 1;
pub const TRACE_META_FILE: &str = "trace.json";
pub const TRACE_IMAGE_FILE: &str = "image.png";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayKind {
    Queries,
    KeyWeights,
    SelfAttention,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub file: String,
    pub kind: ArrayKind,
    pub block: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub format_version: u32,
    pub backend_id: String,
    pub latent_w: usize,
    pub latent_h: usize,
    pub embed_dim: usize,
    pub blocks: Vec<BlockSpec>,
    pub timesteps: Vec<usize>,
    pub seed: u64,
    pub prompt: String,
    pub guidance_branch: String,
    pub dtype: String,
    pub endianness: String,
    pub image: String,
    pub arrays: Vec<ArrayEntry>,
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| OvamError::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(OvamError::Format {
            path: path.to_path_buf(),
            message: format!("expected {} float32 values, found {} bytes", expected, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_trace(trace: &DenoisingTrace, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| OvamError::io(dir, e))?;
    let mut arrays = Vec::new();
    let mut put = |entry: ArrayEntry, data: &[f32]| -> Result<()> {
        let path = dir.join(&entry.file);
        std::fs::write(&path, f32_bytes(data)).map_err(|e| OvamError::io(&path, e))?;
        arrays.push(entry);
        Ok(())
    };
    for (block, kp) in &trace.key_weights {
        put(
            ArrayEntry {
                file: format!("kw_{block}.f32"),
                kind: ArrayKind::KeyWeights,
                block: block.clone(),
                step: None,
                shape: vec![kp.out_dim(), kp.embed_dim],
            },
            &kp.weights,
        )?;
    }
    for ((block, t), q) in &trace.queries {
        put(
            ArrayEntry {
                file: format!("q_{block}_{t}.f32"),
                kind: ArrayKind::Queries,
                block: block.clone(),
                step: Some(*t),
                shape: q.shape().to_vec(),
            },
            &q.data,
        )?;
    }
    for ((block, t), sa) in &trace.self_attn {
        put(
            ArrayEntry {
                file: format!("sa_{block}_{t}.f32"),
                kind: ArrayKind::SelfAttention,
                block: block.clone(),
                step: Some(*t),
                shape: vec![sa.pixels, sa.pixels, sa.heads],
            },
            &sa.data,
        )?;
    }
    let image_path = dir.join(TRACE_IMAGE_FILE);
    trace.image.save(&image_path)?;
    let meta = TraceMeta {
        format_version: TRACE_FORMAT_VERSION,
        backend_id: trace.backend_id.clone(),
        latent_w: trace.latent_w,
        latent_h: trace.latent_h,
        embed_dim: trace.embed_dim,
        blocks: trace.blocks.clone(),
        timesteps: trace.timesteps.clone(),
        seed: trace.seed,
        prompt: trace.prompt.clone(),
        guidance_branch: trace.guidance_branch.clone(),
        dtype: "float32".into(),
        endianness: "little".into(),
        image: TRACE_IMAGE_FILE.into(),
        arrays,
    };
    let meta_path = dir.join(TRACE_META_FILE);
    std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?)
        .map_err(|e| OvamError::io(&meta_path, e))?;
    Ok(())
}

pub fn read_trace(dir: &Path) -> Result<DenoisingTrace> {
    let meta_path = dir.join(TRACE_META_FILE);
    let raw = std::fs::read(&meta_path).map_err(|e| OvamError::io(&meta_path, e))?;
    let meta: TraceMeta = serde_json::from_slice(&raw)?;
    let bad = |message: String| OvamError::Format {
        path: meta_path.clone(),
        message,
    };
    if meta.dtype != "float32" || meta.endianness != "little" {
        return Err(bad(format!(
            "unsupported array encoding {} / {}",
            meta.dtype, meta.endianness
        )));
    }
    let mut queries = BTreeMap::new();
    let mut key_weights = BTreeMap::new();
    let mut self_attn = BTreeMap::new();
    for entry in &meta.arrays {
        if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
            return Err(bad(format!("array file `{}` escapes the container", entry.file)));
        }
        let count: usize = entry.shape.iter().product();
        let data = read_f32(&dir.join(&entry.file), count)?;
        let block = meta
            .blocks
            .iter()
            .find(|b| b.id == entry.block)
            .ok_or_else(|| bad(format!("array for unknown block `{}`", entry.block)))?;
        match (entry.kind, entry.step, entry.shape.as_slice()) {
            (ArrayKind::Queries, Some(t), &[p, h, d]) => {
                queries.insert((entry.block.clone(), t), QueryArray::new(p, h, d, data)?);
            }
            (ArrayKind::KeyWeights, None, &[rows, l_e]) => {
                if rows != block.heads * block.head_dim {
                    return Err(bad(format!("key weights for `{}` have {rows} rows", block.id)));
                }
                key_weights.insert(
                    entry.block.clone(),
                    KeyProjection::new(block.heads, block.head_dim, l_e, data)?,
                );
            }
            (ArrayKind::SelfAttention, Some(t), &[p, p2, h]) if p == p2 => {
                self_attn.insert((entry.block.clone(), t), SelfAttention::new(p, h, data)?);
            }
            _ => return Err(bad(format!("malformed array entry `{}`", entry.file))),
        }
    }
    let image = image::open(dir.join(&meta.image))?.to_rgb8();
    let trace = DenoisingTrace {
        backend_id: meta.backend_id,
        latent_w: meta.latent_w,
        latent_h: meta.latent_h,
        embed_dim: meta.embed_dim,
        blocks: meta.blocks,
        timesteps: meta.timesteps,
        queries,
        key_weights,
        self_attn,
        image,
        seed: meta.seed,
        prompt: meta.prompt,
        guidance_branch: meta.guidance_branch,
    };
    trace.validate()?;
    Ok(trace)
}
