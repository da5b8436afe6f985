//! Bilinear resampling with half-pixel centres (`align_corners = false`).
//!
//! Output sample `x` reads source coordinate `(x + 0.5) · w_src / w_dst − 0.5`,
//! clamped to `[0, w_src − 1]`; interpolation is the lerp form
//! `a + f · (b − a)` along x and then y, so constants and same-size resizes
//! are reproduced exactly.

use crate::error::{OvamError, Result};
use crate::raster::Map2;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Precomputed resampling between two fixed grid sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearPlan {
    src: (usize, usize),
    dst: (usize, usize),
    xs: Vec<Tap>,
    ys: Vec<Tap>,
}

impl BilinearPlan {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Result<Self> {
        if src.0 == 0 || src.1 == 0 {
            return Err(OvamError::InvalidArgument(format!(
                "cannot resize an empty {}x{} map",
                src.0, src.1
            )));
        }
        if dst.0 == 0 || dst.1 == 0 {
            return Err(OvamError::InvalidArgument(format!(
                "resize target {}x{} has a zero dimension",
                dst.0, dst.1
            )));
        }
        Ok(BilinearPlan {
            src,
            dst,
            xs: taps(src.0, dst.0),
            ys: taps(src.1, dst.1),
        })
    }

    pub fn src(&self) -> (usize, usize) {
        self.src
    }

    pub fn dst(&self) -> (usize, usize) {
        self.dst
    }

    /// Resamples a row-major `src` buffer into `out` (overwritten).
    pub fn apply_into(&self, src: &[f64], out: &mut [f64]) {
        let sw = self.src.0;
        let dw = self.dst.0;
        debug_assert_eq!(src.len(), sw * self.src.1);
        debug_assert_eq!(out.len(), dw * self.dst.1);
        for (y, ty) in self.ys.iter().enumerate() {
            let r0 = &src[ty.lo * sw..(ty.lo + 1) * sw];
            let r1 = &src[ty.hi * sw..(ty.hi + 1) * sw];
            let row = &mut out[y * dw..(y + 1) * dw];
            for (o, tx) in row.iter_mut().zip(&self.xs) {
                let top = r0[tx.lo] + tx.frac * (r0[tx.hi] - r0[tx.lo]);
                let bottom = r1[tx.lo] + tx.frac * (r1[tx.hi] - r1[tx.lo]);
                *o = top + ty.frac * (bottom - top);
            }
        }
    }

    /// Accumulates the adjoint: `grad_src += Rᵀ · grad_out`.
    pub fn adjoint_add(&self, grad_out: &[f64], grad_src: &mut [f64]) {
        let sw = self.src.0;
        let dw = self.dst.0;
        for (y, ty) in self.ys.iter().enumerate() {
            let wy1 = ty.frac;
            let wy0 = 1.0 - wy1;
            for (x, tx) in self.xs.iter().enumerate() {
                let g = grad_out[y * dw + x];
                if g == 0.0 {
                    continue;
                }
                let wx1 = tx.frac;
                let wx0 = 1.0 - wx1;
                grad_src[ty.lo * sw + tx.lo] += wy0 * wx0 * g;
                grad_src[ty.lo * sw + tx.hi] += wy0 * wx1 * g;
                grad_src[ty.hi * sw + tx.lo] += wy1 * wx0 * g;
                grad_src[ty.hi * sw + tx.hi] += wy1 * wx1 * g;
            }
        }
    }

    pub fn apply(&self, map: &Map2) -> Result<Map2> {
        if map.dims() != self.src {
            return Err(OvamError::dim(
                "resize source",
                format!("{:?}", self.src),
                format!("{:?}", map.dims()),
            ));
        }
        let mut out = Map2::zeros(self.dst.0, self.dst.1);
        self.apply_into(&map.data, &mut out.data);
        Ok(out)
    }
}

/// Resizes `map` to `width × height`.
pub fn resize_bilinear(map: &Map2, width: usize, height: usize) -> Result<Map2> {
    BilinearPlan::new(map.dims(), (width, height))?.apply(map)
}
