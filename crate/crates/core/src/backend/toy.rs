//! Deterministic toy denoiser for desk-scale verification.
//!
//! Every number it produces follows the recipe below, built on the
//! counter-based [`Stream`] (tags are the `TAG_*` constants of [`ToySpec`]):
//!
//! * **Tokenizer**: lowercase; maximal runs of alphanumeric characters are
//!   words, every other non-whitespace character is its own token; the
//!   result is wrapped in `<|startoftext|>` / `<|endoftext|>`.
//! * **Text embedding**: token `s` maps to `e[i] = Stream([TAG_TEXT, fnv1a64(s)]).uniform(i)`.
//! * **Key projection** of block `b`: draw `G[r, i] =
//!   Stream([TAG_KEY, model_seed, fnv1a64(b)]).uniform(r · l_E + i)` for output
//!   row `r = head · head_dim + c`, orthonormalize the rows of each head in
//!   order (classical Gram-Schmidt; rows past `l_E` are only normalized) and
//!   multiply by `key_scale`.
//! * **Layout**: with `L = Stream([TAG_LAYOUT, seed])` and `n = W/2` cells of
//!   two latent pixels, the object spans `x ∈ [2a, 2(a + n/2 + b))` with
//!   `a = L.below(0, n/2)`, `b = L.below(1, n/4 + 1)` (integer division),
//!   `y` likewise with samples 2 and 3, clipped to the latent grid.
//! * **Features**: at block resolution, `s(p)` is the fraction of the
//!   `r × r` latent cell covered by the object and
//!   `f(p) = s·mean(X[1..]) + (1 − s)·X[0]`, `X` being the prompt embedding.
//! * **Queries** at step index `j` of `T`: with `π = (j + 1)/T`,
//!   `q[p,h,c] = query_gain·π·(W f(p))[h,c] + (query_noise·(1 − π) + noise_floor)·
//!   Stream([TAG_QUERY, seed, fnv1a64(b), j]).uniform((p·heads + h)·head_dim + c)`.
//! * **Self-attention** (latent resolution): logits
//!   `self_sharpness[h]·(s(p)s(p′) + (1 − s(p))(1 − s(p′))) + self_noise·
//!   Stream([TAG_SELF, seed, fnv1a64(b), j]).uniform((p·n + p′)·heads + h)`,
//!   softmax over `p′`.
//! * **Image**: `image_scale ×` the latent size; object and background colours
//!   and a per-pixel texture from `Stream([TAG_IMAGE, seed])`. Depends on the
//!   seed only.
//!
//! During synthesis the toy evaluates cross-attention with the prompt's own
//! keys through the same kernels used for attribution and reports it to the
//! capture hook.

use image::{Rgb, RgbImage};

use super::prng::{fnv1a64, Stream};
use super::recorder::{CaptureHook, TraceRecorder};
use super::{
    BlockKind, BlockSpec, DenoisingTrace, Denoiser, KeyProjection, QueryArray, SelfAttention,
    TokenEmbeddingMatrix, EOT_LABEL, SOT_LABEL,
};
use crate::error::{OvamError, Result};
use crate::ovam::{attention_matrix, project_attribution_keys};

pub const TOY_BACKEND_ID: &str = "toy";

/// Published constants of the toy backend.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub latent_w: usize,
    pub latent_h: usize,
    pub image_scale: usize,
    pub embed_dim: usize,
    pub max_tokens: usize,
    pub default_timesteps: usize,
    pub blocks: Vec<BlockSpec>,
    pub model_seed: u64,
    pub key_scale: f64,
    pub query_gain: f64,
    pub query_noise: f64,
    pub noise_floor: f64,
    pub self_sharpness: Vec<f64>,
    pub self_noise: f64,
}

impl ToySpec {
    pub const TAG_TEXT: u64 = 1;
    pub const TAG_KEY: u64 = 2;
    pub const TAG_QUERY: u64 = 3;
    pub const TAG_SELF: u64 = 4;
    pub const TAG_LAYOUT: u64 = 5;
    pub const TAG_IMAGE: u64 = 6;

    pub fn image_dims(&self) -> (usize, usize) {
        (
            self.latent_w * self.image_scale,
            self.latent_h * self.image_scale,
        )
    }
}

pub fn toy_denoiser_spec() -> ToySpec {
    ToySpec {
        latent_w: 32,
        latent_h: 32,
        image_scale: 2,
        embed_dim: 16,
        max_tokens: 77,
        default_timesteps: 3,
        blocks: vec![
            BlockSpec::new("cross_r1", 1, 2, 16, BlockKind::Cross),
            BlockSpec::new("cross_r2", 2, 2, 16, BlockKind::Cross),
            BlockSpec::new("self_r1", 1, 2, 16, BlockKind::SelfAttn),
        ],
        model_seed: 0x07A1_5EED,
        key_scale: 1.0,
        query_gain: 8.0,
        query_noise: 1.0,
        noise_floor: 0.1,
        self_sharpness: vec![4.0, 2.0],
        self_noise: 0.5,
    }
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    spec: ToySpec,
}

impl Default for ToyDenoiser {
    fn default() -> Self {
        Self::new()
    }
}

impl ToyDenoiser {
    pub fn new() -> Self {
        ToyDenoiser {
            spec: toy_denoiser_spec(),
        }
    }

    pub fn with_spec(spec: ToySpec) -> Self {
        ToyDenoiser { spec }
    }

    pub fn spec(&self) -> &ToySpec {
        &self.spec
    }

    pub fn key_projection(&self, block: &BlockSpec) -> KeyProjection {
        let s = Stream::new(&[ToySpec::TAG_KEY, self.spec.model_seed, fnv1a64(&block.id)]);
        let l_e = self.spec.embed_dim;
        let mut weights = Vec::with_capacity(block.heads * block.head_dim * l_e);
        for h in 0..block.heads {
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(block.head_dim);
            for c in 0..block.head_dim {
                let base = ((h * block.head_dim + c) * l_e) as u64;
                let mut v: Vec<f64> = (0..l_e as u64).map(|i| s.uniform(base + i)).collect();
                // Gram-Schmidt against the earlier rows of this head.
                if c < l_e {
                    for r in &rows {
                        let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                        v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
                    }
                }
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|a| *a /= norm);
                }
                rows.push(v);
            }
            for row in rows {
                weights.extend(row.into_iter().map(|a| (self.spec.key_scale * a) as f32));
            }
        }
        KeyProjection::new(block.heads, block.head_dim, l_e, weights)
            .expect("toy projection shape is consistent")
    }

    /// Latent object mask, row-major.
    pub fn layout(&self, seed: u64) -> Vec<bool> {
        let (w, h) = (self.spec.latent_w, self.spec.latent_h);
        let l = Stream::new(&[ToySpec::TAG_LAYOUT, seed]);
        let span = |len: usize, a: u64, b: u64| {
            let cells = (len / 2).max(1) as u64;
            let start = 2 * l.below(a, (cells / 2).max(1)) as usize;
            let size = 2 * ((cells / 2).max(1) + l.below(b, cells / 4 + 1)) as usize;
            (start, (start + size).min(len))
        };
        let (x0, x1) = span(w, 0, 1);
        let (y0, y1) = span(h, 2, 3);
        let mut mask = vec![false; w * h];
        for y in y0..y1 {
            for x in x0..x1 {
                mask[y * w + x] = true;
            }
        }
        mask
    }

    fn shares(&self, layout: &[bool], reduction: usize) -> Vec<f64> {
        let (w, h) = (self.spec.latent_w, self.spec.latent_h);
        let bw = w.div_ceil(reduction);
        let bh = h.div_ceil(reduction);
        let mut out = Vec::with_capacity(bw * bh);
        for by in 0..bh {
            for bx in 0..bw {
                let mut inside = 0usize;
                let mut total = 0usize;
                for y in by * reduction..((by + 1) * reduction).min(h) {
                    for x in bx * reduction..((bx + 1) * reduction).min(w) {
                        total += 1;
                        inside += layout[y * w + x] as usize;
                    }
                }
                out.push(inside as f64 / total as f64);
            }
        }
        out
    }

    pub fn image(&self, seed: u64) -> RgbImage {
        let (iw, ih) = self.spec.image_dims();
        let scale = self.spec.image_scale;
        let layout = self.layout(seed);
        let s = Stream::new(&[ToySpec::TAG_IMAGE, seed]);
        let bg: Vec<f64> = (0..3).map(|c| 30.0 + s.below(c, 100) as f64).collect();
        let fg: Vec<f64> = (0..3).map(|c| 140.0 + s.below(3 + c, 110) as f64).collect();
        RgbImage::from_fn(iw as u32, ih as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            let inside = layout[(y / scale) * self.spec.latent_w + x / scale];
            let base = if inside { &fg } else { &bg };
            let mut px = [0u8; 3];
            for c in 0..3 {
                let tex = 6.0 * s.uniform(16 + ((y * iw + x) * 3 + c) as u64);
                px[c] = (base[c] + tex).round().clamp(0.0, 255.0) as u8;
            }
            Rgb(px)
        })
    }
}

impl Denoiser for ToyDenoiser {
    fn id(&self) -> &str {
        TOY_BACKEND_ID
    }

    fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    fn max_tokens(&self) -> usize {
        self.spec.max_tokens
    }

    fn tokenize(&self, prompt: &str) -> Result<Vec<String>> {
        let mut tokens = vec![SOT_LABEL.to_string()];
        let mut word = String::new();
        for ch in prompt.to_lowercase().chars() {
            if ch.is_alphanumeric() {
                word.push(ch);
                continue;
            }
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
        tokens.push(EOT_LABEL.to_string());
        if tokens.len() > self.spec.max_tokens {
            return Err(OvamError::PromptTooLong {
                count: tokens.len(),
                max: self.spec.max_tokens,
            });
        }
        Ok(tokens)
    }

    fn encode_text(&self, prompt: &str) -> Result<TokenEmbeddingMatrix> {
        let labels = self.tokenize(prompt)?;
        let l_e = self.spec.embed_dim;
        let mut data = Vec::with_capacity(labels.len() * l_e);
        for label in &labels {
            let s = Stream::new(&[ToySpec::TAG_TEXT, fnv1a64(label)]);
            data.extend((0..l_e).map(|i| s.uniform(i as u64)));
        }
        TokenEmbeddingMatrix::new(l_e, data, labels)
    }

    fn generate_with_hook(
        &self,
        prompt: &str,
        seed: u64,
        num_timesteps: usize,
        mut hook: Option<&mut dyn CaptureHook>,
    ) -> Result<DenoisingTrace> {
        if num_timesteps == 0 {
            return Err(OvamError::InvalidArgument(
                "num_timesteps must be at least 1".into(),
            ));
        }
        let spec = &self.spec;
        let x = self.encode_text(prompt)?;
        let l_e = spec.embed_dim;
        let background = x.row(0).to_vec();
        let mut subject = vec![0.0; l_e];
        for k in 1..x.len() {
            for (s, v) in subject.iter_mut().zip(x.row(k)) {
                *s += v;
            }
        }
        let rest = (x.len() - 1).max(1) as f64;
        subject.iter_mut().for_each(|s| *s /= rest);

        let layout = self.layout(seed);
        let steps: Vec<usize> = (0..num_timesteps).collect();
        let mut rec = TraceRecorder::new(
            TOY_BACKEND_ID,
            spec.latent_w,
            spec.latent_h,
            l_e,
            spec.blocks.clone(),
            steps.clone(),
            seed,
            prompt,
            "conditional",
        );

        let mut projections = Vec::new();
        for block in spec.blocks.iter().filter(|b| b.kind == BlockKind::Cross) {
            let kp = self.key_projection(block);
            rec.set_key_projection(&block.id, kp.clone());
            let keys = project_attribution_keys(&x, block, &kp)?;
            projections.push((block, kp, keys));
        }

        for &j in &steps {
            let progress = (j + 1) as f64 / num_timesteps as f64;
            let gain = spec.query_gain * progress;
            let noise = spec.query_noise * (1.0 - progress) + spec.noise_floor;
            for (block, kp, keys) in &projections {
                let shares = self.shares(&layout, block.reduction);
                let stream = Stream::new(&[ToySpec::TAG_QUERY, seed, fnv1a64(&block.id), j as u64]);
                let mut data = Vec::with_capacity(shares.len() * block.heads * block.head_dim);
                let mut feature = vec![0.0; l_e];
                for (p, &s) in shares.iter().enumerate() {
                    for (f, (a, b)) in feature.iter_mut().zip(subject.iter().zip(&background)) {
                        *f = s * a + (1.0 - s) * b;
                    }
                    for h in 0..block.heads {
                        for c in 0..block.head_dim {
                            let proj: f64 = kp
                                .row(h, c)
                                .iter()
                                .zip(&feature)
                                .map(|(w, f)| *w as f64 * f)
                                .sum();
                            let n = ((p * block.heads + h) * block.head_dim + c) as u64;
                            data.push((gain * proj + noise * stream.uniform(n)) as f32);
                        }
                    }
                }
                let q = QueryArray::new(shares.len(), block.heads, block.head_dim, data)?;
                let probs = attention_matrix(&q, keys)?;
                rec.on_cross_queries(block, j, &q);
                if let Some(h) = hook.as_deref_mut() {
                    h.on_cross_queries(block, j, &q);
                    h.on_cross_attention(block, j, &probs);
                }
            }
            for block in spec.blocks.iter().filter(|b| b.kind == BlockKind::SelfAttn) {
                let sa = self.self_attention(block, &layout, seed, j)?;
                rec.on_self_attention(block, j, &sa);
                if let Some(h) = hook.as_deref_mut() {
                    h.on_self_attention(block, j, &sa);
                }
            }
        }
        rec.finish(self.image(seed))
    }
}

impl ToyDenoiser {
    fn self_attention(
        &self,
        block: &BlockSpec,
        layout: &[bool],
        seed: u64,
        step: usize,
    ) -> Result<SelfAttention> {
        let shares = self.shares(layout, block.reduction);
        let n = shares.len();
        let heads = block.heads;
        let stream = Stream::new(&[ToySpec::TAG_SELF, seed, fnv1a64(&block.id), step as u64]);
        let mut data = vec![0f32; n * n * heads];
        let mut row = vec![0.0; n];
        for h in 0..heads {
            let sharp = self.spec.self_sharpness[h % self.spec.self_sharpness.len()];
            for p in 0..n {
                for (pp, logit) in row.iter_mut().enumerate() {
                    let same = shares[p] * shares[pp] + (1.0 - shares[p]) * (1.0 - shares[pp]);
                    let u = stream.uniform(((p * n + pp) * heads + h) as u64);
                    *logit = sharp * same + self.spec.self_noise * u;
                }
                crate::ovam::softmax_in_place(&mut row);
                for (pp, v) in row.iter().enumerate() {
                    data[(p * n + pp) * heads + h] = *v as f32;
                }
            }
        }
        SelfAttention::new(n, heads, data)
    }
}
