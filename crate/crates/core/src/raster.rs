//! Dense 2-D grids shared by every stage: real-valued maps, boolean masks
//! and RGB images.
//!
//! All grids are stored row-major, index `y * width + x`.

use std::path::Path;

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{OvamError, Result};

/// Real-valued `width × height` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Map2 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Map2 {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Map2 {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(OvamError::dim("map data", width * height, data.len()));
        }
        Ok(Map2 {
            width,
            height,
            data,
        })
    }

    /// Builds a map from nested rows (`rows[y][x]`).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(OvamError::InvalidArgument("ragged rows".into()));
        }
        Map2::from_vec(width, height, rows.concat())
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Index of the first maximal element.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn add_assign(&mut self, other: &Map2) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Map2) -> Result<Map2> {
        if self.dims() != other.dims() {
            return Err(OvamError::dim(
                "elementwise product",
                format!("{:?}", self.dims()),
                format!("{:?}", other.dims()),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Map2 {
            width: self.width,
            height: self.height,
            data,
        })
    }

    /// Little-endian float32 raster, row-major.
    pub fn to_f32_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }
}

/// Boolean `width × height` grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoolGrid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BoolGrid {
    pub fn new(width: usize, height: usize) -> Self {
        BoolGrid {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut g = BoolGrid::new(width, height);
        for y in 0..height {
            for x in 0..width {
                g.data[y * width + x] = f(x, y);
            }
        }
        g
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn area_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.count() as f64 / self.data.len() as f64
    }

    pub fn complement(&self) -> BoolGrid {
        BoolGrid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    /// Nearest-neighbour resampling.
    pub fn resize_nearest(&self, width: usize, height: usize) -> BoolGrid {
        BoolGrid::from_fn(width, height, |x, y| {
            let sx = (x * self.width / width).min(self.width - 1);
            let sy = (y * self.height / height).min(self.height - 1);
            self.get(sx, sy)
        })
    }

    /// 8-bit grayscale: 0 for false, 255 for true.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    /// Any nonzero pixel is true.
    pub fn from_gray(img: &GrayImage) -> BoolGrid {
        let (w, h) = img.dimensions();
        BoolGrid::from_fn(w as usize, h as usize, |x, y| {
            img.get_pixel(x as u32, y as u32).0[0] != 0
        })
    }

    /// Same bytes as [`BoolGrid::to_png_bytes`].
    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?).map_err(|e| OvamError::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<BoolGrid> {
        let img = image::open(path)?.to_luma8();
        Ok(BoolGrid::from_gray(&img))
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        encode_png(&image::DynamicImage::ImageLuma8(self.to_gray()))
    }
}

pub(crate) fn encode_png(img: &image::DynamicImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn rgb_to_png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    encode_png(&image::DynamicImage::ImageRgb8(img.clone()))
}
