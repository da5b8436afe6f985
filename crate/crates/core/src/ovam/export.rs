//! Heatmap export: raw float32 raster, JSON sidecar, false-colour PNG.
//!
//! The PNG divides each map by its own maximum and maps the result through
//! [`COLORMAP_STOPS`], five evenly spaced RGB stops (black, purple, red,
//! orange, pale yellow) interpolated linearly. An all-zero map renders black.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::Normalization;
use crate::error::{OvamError, Result};
use crate::raster::{rgb_to_png_bytes, Map2};

pub const COLORMAP_STOPS: [[u8; 3]; 5] = [
    [0, 0, 4],
    [87, 16, 110],
    [188, 55, 84],
    [249, 142, 9],
    [252, 255, 164],
];

fn ramp(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0) * (COLORMAP_STOPS.len() - 1) as f64;
    let i = (v.floor() as usize).min(COLORMAP_STOPS.len() - 2);
    let f = v - i as f64;
    let a = COLORMAP_STOPS[i];
    let b = COLORMAP_STOPS[i + 1];
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (a[c] as f64 + f * (b[c] as f64 - a[c] as f64)).round() as u8;
    }
    out
}

pub fn colorize(map: &Map2) -> RgbImage {
    let max = map.max();
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    RgbImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        Rgb(ramp(map.get(x as usize, y as usize) * scale))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapFileMeta {
    pub width: usize,
    pub height: usize,
    pub dtype: String,
    pub endianness: String,
    pub token_label: String,
    pub normalization: Normalization,
    pub slices: usize,
}

/// Writes `<prefix>.f32`, `<prefix>.json` and `<prefix>.png`; returns the
/// three paths in that order.
pub fn write_heatmap(
    prefix: &Path,
    map: &Map2,
    token_label: &str,
    normalization: Normalization,
    slices: usize,
) -> Result<[PathBuf; 3]> {
    let with_ext = |ext: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(".");
        p.push(ext);
        PathBuf::from(p)
    };
    let raw = with_ext("f32");
    let meta_path = with_ext("json");
    let png = with_ext("png");
    std::fs::write(&raw, map.to_f32_bytes()).map_err(|e| OvamError::io(&raw, e))?;
    let meta = HeatmapFileMeta {
        width: map.width,
        height: map.height,
        dtype: "float32".into(),
        endianness: "little".into(),
        token_label: token_label.to_string(),
        normalization,
        slices,
    };
    std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?)
        .map_err(|e| OvamError::io(&meta_path, e))?;
    std::fs::write(&png, rgb_to_png_bytes(&colorize(map))?).map_err(|e| OvamError::io(&png, e))?;
    Ok([raw, meta_path, png])
}
