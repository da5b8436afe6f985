//! Fully connected CRF with Gaussian pairwise potentials.
//!
//! Two labels (background, class), Potts compatibility, a spatial kernel over
//! `(x/θγ, y/θγ)` and a bilateral kernel over `(x/θα, y/θα, rgb/θβ)`.
//! Mean-field inference filters through a permutohedral lattice with
//! symmetric kernel normalization.

use std::collections::HashMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{OvamError, Result};
use crate::raster::BoolGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfParams {
    pub w_bilateral: f64,
    pub theta_alpha: f64,
    pub theta_beta: f64,
    pub w_spatial: f64,
    pub theta_gamma: f64,
    pub iterations: usize,
    /// Probability given to the mask's label in the unary term.
    pub unary_confidence: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            w_bilateral: 10.0,
            theta_alpha: 80.0,
            theta_beta: 13.0,
            w_spatial: 3.0,
            theta_gamma: 3.0,
            iterations: 5,
            unary_confidence: 0.9,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.theta_alpha, self.theta_beta, self.theta_gamma];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(OvamError::Config("CRF kernel widths must be positive".into()));
        }
        if !(self.w_bilateral >= 0.0 && self.w_spatial >= 0.0) {
            return Err(OvamError::Config("CRF weights must be non-negative".into()));
        }
        if !(self.unary_confidence > 0.5 && self.unary_confidence < 1.0) {
            return Err(OvamError::Config(format!(
                "CRF unary confidence {} must lie in (0.5, 1)",
                self.unary_confidence
            )));
        }
        Ok(())
    }
}

/// Sparse lattice built once per feature set and reused for every filtering.
struct Permutohedral {
    d: usize,
    n: usize,
    /// Per input point, `d + 1` lattice vertex indices and weights.
    offsets: Vec<usize>,
    weights: Vec<f64>,
    vertices: usize,
    /// Per blur direction and vertex, the two neighbour indices (`usize::MAX`
    /// when absent).
    neighbours: Vec<(usize, usize)>,
}

impl Permutohedral {
    fn new(features: &[f64], d: usize) -> Self {
        let n = features.len() / d;
        let d1 = d + 1;
        let inv_std = (2.0f64 / 3.0).sqrt() * d1 as f64;
        let scale: Vec<f64> = (0..d)
            .map(|i| inv_std / (((i + 1) * (i + 2)) as f64).sqrt())
            .collect();
        let mut canonical = vec![0i32; d1 * d1];
        for i in 0..d1 {
            for j in 0..d1 - i {
                canonical[i * d1 + j] = i as i32;
            }
            for j in d1 - i..d1 {
                canonical[i * d1 + j] = i as i32 - d1 as i32;
            }
        }

        let mut table: HashMap<Vec<i32>, usize> = HashMap::new();
        let mut keys: Vec<Vec<i32>> = Vec::new();
        let mut offsets = vec![0usize; n * d1];
        let mut weights = vec![0.0; n * d1];
        let mut elevated = vec![0.0; d1];
        let mut rem0 = vec![0i32; d1];
        let mut rank = vec![0i32; d1];
        let mut bary = vec![0.0; d + 2];
        let mut key = vec![0i32; d];

        for p in 0..n {
            let f = &features[p * d..(p + 1) * d];
            let mut sm = 0.0;
            for j in (1..=d).rev() {
                let cf = f[j - 1] * scale[j - 1];
                elevated[j] = sm - j as f64 * cf;
                sm += cf;
            }
            elevated[0] = sm;

            let mut sum = 0i32;
            for i in 0..d1 {
                let v = elevated[i] / d1 as f64;
                let up = v.ceil() * d1 as f64;
                let down = v.floor() * d1 as f64;
                rem0[i] = if up - elevated[i] < elevated[i] - down {
                    up as i32
                } else {
                    down as i32
                };
                sum += rem0[i];
            }
            sum /= d1 as i32;

            rank.iter_mut().for_each(|r| *r = 0);
            for i in 0..d {
                let di = elevated[i] - rem0[i] as f64;
                for j in i + 1..d1 {
                    if di < elevated[j] - rem0[j] as f64 {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }
            let d1i = d1 as i32;
            if sum > 0 {
                for i in 0..d1 {
                    if rank[i] >= d1i - sum {
                        rem0[i] -= d1i;
                        rank[i] += sum - d1i;
                    } else {
                        rank[i] += sum;
                    }
                }
            } else if sum < 0 {
                for i in 0..d1 {
                    if rank[i] < -sum {
                        rem0[i] += d1i;
                        rank[i] += d1i + sum;
                    } else {
                        rank[i] += sum;
                    }
                }
            }

            bary.iter_mut().for_each(|b| *b = 0.0);
            for i in 0..d1 {
                let v = (elevated[i] - rem0[i] as f64) / d1 as f64;
                bary[d - rank[i] as usize] += v;
                bary[d + 1 - rank[i] as usize] -= v;
            }
            bary[0] += 1.0 + bary[d + 1];

            for r in 0..d1 {
                for i in 0..d {
                    key[i] = rem0[i] + canonical[r * d1 + rank[i] as usize];
                }
                let next = keys.len();
                let idx = *table.entry(key.clone()).or_insert_with(|| {
                    keys.push(key.clone());
                    next
                });
                offsets[p * d1 + r] = idx;
                weights[p * d1 + r] = bary[r];
            }
        }

        let vertices = keys.len();
        let mut neighbours = Vec::with_capacity(d1 * vertices);
        let mut n1 = vec![0i32; d];
        let mut n2 = vec![0i32; d];
        for j in 0..d1 {
            for k in &keys {
                for i in 0..d {
                    n1[i] = k[i] - 1;
                    n2[i] = k[i] + 1;
                }
                if j < d {
                    n1[j] = k[j] + d as i32;
                    n2[j] = k[j] - d as i32;
                }
                let a = table.get(&n1).copied().unwrap_or(usize::MAX);
                let b = table.get(&n2).copied().unwrap_or(usize::MAX);
                neighbours.push((a, b));
            }
        }

        Permutohedral {
            d,
            n,
            offsets,
            weights,
            vertices,
            neighbours,
        }
    }

    /// Gaussian filtering of `channels` interleaved values per point.
    fn compute(&self, input: &[f64], channels: usize) -> Vec<f64> {
        let d1 = self.d + 1;
        let mut values = vec![0.0; self.vertices * channels];
        for p in 0..self.n {
            for r in 0..d1 {
                let o = self.offsets[p * d1 + r];
                let w = self.weights[p * d1 + r];
                for c in 0..channels {
                    values[o * channels + c] += w * input[p * channels + c];
                }
            }
        }
        let mut next = vec![0.0; values.len()];
        for j in 0..d1 {
            for v in 0..self.vertices {
                let (a, b) = self.neighbours[j * self.vertices + v];
                for c in 0..channels {
                    let na = if a == usize::MAX { 0.0 } else { values[a * channels + c] };
                    let nb = if b == usize::MAX { 0.0 } else { values[b * channels + c] };
                    next[v * channels + c] = values[v * channels + c] + 0.5 * (na + nb);
                }
            }
            std::mem::swap(&mut values, &mut next);
        }
        let alpha = 1.0 / (1.0 + 2f64.powi(-(self.d as i32)));
        let mut out = vec![0.0; self.n * channels];
        for p in 0..self.n {
            for r in 0..d1 {
                let o = self.offsets[p * d1 + r];
                let w = self.weights[p * d1 + r];
                for c in 0..channels {
                    out[p * channels + c] += alpha * w * values[o * channels + c];
                }
            }
        }
        out
    }
}

struct Kernel {
    lattice: Permutohedral,
    norm: Vec<f64>,
    weight: f64,
}

impl Kernel {
    fn new(features: &[f64], d: usize, weight: f64) -> Self {
        let lattice = Permutohedral::new(features, d);
        let ones = vec![1.0; lattice.n];
        let norm = lattice
            .compute(&ones, 1)
            .into_iter()
            .map(|s| 1.0 / (s + 1e-20).sqrt())
            .collect();
        Kernel {
            lattice,
            norm,
            weight,
        }
    }

    /// Adds `weight · N K N q` to `acc` (Potts: same-label messages).
    fn message(&self, q: &[f64], labels: usize, acc: &mut [f64]) {
        let scaled: Vec<f64> = q
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.norm[i / labels])
            .collect();
        let filtered = self.lattice.compute(&scaled, labels);
        for (i, (a, f)) in acc.iter_mut().zip(filtered).enumerate() {
            *a += self.weight * f * self.norm[i / labels];
        }
    }
}

fn exp_normalize(logits: &[f64], labels: usize, out: &mut [f64]) {
    for (src, dst) in logits.chunks_exact(labels).zip(out.chunks_exact_mut(labels)) {
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (d, v) in dst.iter_mut().zip(src) {
            *d = (v - m).exp();
            s += *d;
        }
        dst.iter_mut().for_each(|d| *d /= s);
    }
}

/// Dense CRF refinement of a binary mask.
pub fn dense_crf(image: &RgbImage, mask: &BoolGrid, params: &CrfParams) -> Result<BoolGrid> {
    params.validate()?;
    let (w, h) = (image.width() as usize, image.height() as usize);
    if mask.dims() != (w, h) {
        return Err(OvamError::dim(
            "CRF mask vs image",
            format!("{w}x{h}"),
            format!("{}x{}", mask.width, mask.height),
        ));
    }
    let n = w * h;
    if n == 0 {
        return Ok(mask.clone());
    }
    const L: usize = 2;

    let mut spatial = Vec::with_capacity(n * 2);
    let mut bilateral = Vec::with_capacity(n * 5);
    for y in 0..h {
        for x in 0..w {
            spatial.push(x as f64 / params.theta_gamma);
            spatial.push(y as f64 / params.theta_gamma);
            let px = image.get_pixel(x as u32, y as u32).0;
            bilateral.push(x as f64 / params.theta_alpha);
            bilateral.push(y as f64 / params.theta_alpha);
            for c in px {
                bilateral.push(c as f64 / params.theta_beta);
            }
        }
    }
    let kernels = [
        Kernel::new(&spatial, 2, params.w_spatial),
        Kernel::new(&bilateral, 5, params.w_bilateral),
    ];

    let hi = -params.unary_confidence.ln();
    let lo = -(1.0 - params.unary_confidence).ln();
    let mut unary = Vec::with_capacity(n * L);
    for &m in &mask.data {
        // Label 0 is background, label 1 the class.
        if m {
            unary.extend([lo, hi]);
        } else {
            unary.extend([hi, lo]);
        }
    }
    let neg_unary: Vec<f64> = unary.iter().map(|u| -u).collect();
    let mut q = vec![0.0; n * L];
    exp_normalize(&neg_unary, L, &mut q);
    for _ in 0..params.iterations {
        let mut logits = neg_unary.clone();
        for k in &kernels {
            k.message(&q, L, &mut logits);
        }
        exp_normalize(&logits, L, &mut q);
    }
    let data = q.chunks_exact(L).map(|p| p[1] > p[0]).collect();
    Ok(BoolGrid {
        width: w,
        height: h,
        data,
    })
}
