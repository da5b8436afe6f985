//! Reference implementations for the integration tests.
//!
//! Everything here is written from the documented recipes with plain loops and
//! shares no code with the library, so agreement between the two is evidence
//! rather than tautology. The scenario builders at the bottom are shared with
//! the acceptance runner.
#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ovam_core::backend::{
    BlockKind, CrossAttentionCapture, DenoisingTrace, Denoiser, QueryArray, ToyDenoiser,
};
use ovam_core::optimizer::{
    gradient, init_attribution_tokens, optimize_tokens, GroundTruthMask, Objective,
    OptimizerConfig, TrainingPair,
};
use ovam_core::ovam::{
    attention_matrix, compute_ovam, resize_bilinear, AttributionKeys, Normalization,
    SelectionConfig,
};
use ovam_core::dataset::{
    area_filter, clip_filter, DatasetManifest, DropReason, FnScorer, ManifestEntry,
};
use ovam_core::mask::{binarize, rescale};
use ovam_core::raster::{BoolGrid, Map2};
use ovam_core::TokenEmbeddingMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- PRNG recipe

pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x100000001b3)
    })
}

pub fn stream_key(parts: &[u64]) -> u64 {
    let mut k = 0u64;
    for p in parts {
        k = splitmix(k ^ p);
    }
    k
}

pub fn sample_bits(key: u64, n: u64) -> u64 {
    splitmix(key ^ n.wrapping_mul(0xD1B54A32D192ED03))
}

pub fn sample_uniform(key: u64, n: u64) -> f64 {
    let top = sample_bits(key, n) >> 11;
    top as f64 / 9007199254740992.0 * 2.0 - 1.0
}

pub const TAG_TEXT: u64 = 1;
pub const TAG_KEY: u64 = 2;
pub const TAG_QUERY: u64 = 3;
pub const TAG_LAYOUT: u64 = 5;

/// Hash embedding of one token string.
pub fn hash_embedding(token: &str, dim: usize) -> Vec<f64> {
    let key = stream_key(&[TAG_TEXT, fnv(token)]);
    (0..dim).map(|i| sample_uniform(key, i as u64)).collect()
}

/// Toy key projection rebuilt from the recipe: `[heads·head_dim, l_E]`.
pub fn toy_key_weights(model_seed: u64, block: &str, heads: usize, head_dim: usize, l_e: usize, key_scale: f64) -> Vec<f64> {
    let key = stream_key(&[TAG_KEY, model_seed, fnv(block)]);
    let mut out = Vec::new();
    for h in 0..heads {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for c in 0..head_dim {
            let r = h * head_dim + c;
            let mut v: Vec<f64> = (0..l_e).map(|i| sample_uniform(key, (r * l_e + i) as u64)).collect();
            if c < l_e {
                for b in &basis {
                    let d: f64 = (0..l_e).map(|i| v[i] * b[i]).sum();
                    for i in 0..l_e {
                        v[i] -= d * b[i];
                    }
                }
            }
            let n: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            for a in v.iter_mut() {
                *a /= n;
            }
            basis.push(v);
        }
        for v in basis {
            out.extend(v.iter().map(|a| key_scale * a));
        }
    }
    out
}

/// Toy object layout rebuilt from the recipe, row-major.
pub fn toy_layout(seed: u64, w: usize, h: usize) -> Vec<bool> {
    let key = stream_key(&[TAG_LAYOUT, seed]);
    let range = |len: usize, na: u64, nb: u64| {
        let cells = (len / 2) as u64;
        let a = sample_bits(key, na) % (cells / 2);
        let b = sample_bits(key, nb) % (cells / 4 + 1);
        let lo = 2 * a as usize;
        (lo, (2 * (a + cells / 2 + b) as usize).min(len))
    };
    let (x0, x1) = range(w, 0, 1);
    let (y0, y1) = range(h, 2, 3);
    let mut m = vec![false; w * h];
    for y in y0..y1 {
        for x in x0..x1 {
            m[y * w + x] = true;
        }
    }
    m
}

/// Toy query array of one cross block and step, `[pixels, heads, head_dim]`.
pub fn toy_queries(toy: &ToyDenoiser, prompt: &str, seed: u64, block_id: &str, step: usize, steps: usize) -> Vec<f64> {
    let spec = toy.spec();
    let block = spec.blocks.iter().find(|b| b.id == block_id).unwrap();
    let (w, h, l_e) = (spec.latent_w, spec.latent_h, spec.embed_dim);
    let tokens = toy.tokenize(prompt).unwrap();
    let rows: Vec<Vec<f64>> = tokens.iter().map(|t| hash_embedding(t, l_e)).collect();
    let bg = rows[0].clone();
    let mut subj = vec![0.0; l_e];
    for r in &rows[1..] {
        for i in 0..l_e {
            subj[i] += r[i];
        }
    }
    for v in subj.iter_mut() {
        *v /= (rows.len() - 1) as f64;
    }
    let wts = toy_key_weights(spec.model_seed, block_id, block.heads, block.head_dim, l_e, spec.key_scale);
    // f32 storage of the weights is part of the published trace format.
    let wts: Vec<f64> = wts.iter().map(|v| *v as f32 as f64).collect();
    let layout = toy_layout(seed, w, h);
    let r = block.reduction;
    let (bw, bh) = (w.div_ceil(r), h.div_ceil(r));
    let pi = (step + 1) as f64 / steps as f64;
    let gain = spec.query_gain * pi;
    let noise = spec.query_noise * (1.0 - pi) + spec.noise_floor;
    let qkey = stream_key(&[TAG_QUERY, seed, fnv(block_id), step as u64]);
    let mut out = Vec::new();
    for by in 0..bh {
        for bx in 0..bw {
            let (mut inside, mut total) = (0.0, 0.0);
            for y in by * r..((by + 1) * r).min(h) {
                for x in bx * r..((bx + 1) * r).min(w) {
                    total += 1.0;
                    if layout[y * w + x] {
                        inside += 1.0;
                    }
                }
            }
            let s = inside / total;
            let p = by * bw + bx;
            for hd in 0..block.heads {
                for c in 0..block.head_dim {
                    let row = (hd * block.head_dim + c) * l_e;
                    let mut proj = 0.0;
                    for i in 0..l_e {
                        proj += wts[row + i] * (s * subj[i] + (1.0 - s) * bg[i]);
                    }
                    let n = ((p * block.heads + hd) * block.head_dim + c) as u64;
                    out.push(gain * proj + noise * sample_uniform(qkey, n));
                }
            }
        }
    }
    out
}

// ------------------------------------------------------------ attention maths

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}


/// `softmax(q·kᵀ/√d)` by triple loop: `[pixels, heads, tokens]`.
pub fn attention_naive(q: &[f64], k: &[f64], pixels: usize, heads: usize, d: usize, tokens: usize) -> Vec<f64> {
    let mut out = vec![0.0; pixels * heads * tokens];
    for p in 0..pixels {
        for h in 0..heads {
            let mut logits = vec![0.0; tokens];
            for t in 0..tokens {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q[(p * heads + h) * d + c] * k[(t * heads + h) * d + c];
                }
                logits[t] = dot / (d as f64).sqrt();
            }
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for t in 0..tokens {
                out[(p * heads + h) * tokens + t] = (logits[t] - m).exp() / z;
            }
        }
    }
    out
}

/// Row-wise `x · Wᵀ` with `W` of shape `[out, l_E]`.
pub fn matmul_naive(x: &[Vec<f64>], w: &[f64], out_dim: usize) -> Vec<f64> {
    let l_e = x[0].len();
    let mut out = Vec::new();
    for row in x {
        for o in 0..out_dim {
            let mut acc = 0.0;
            for i in 0..l_e {
                acc += w[o * l_e + i] * row[i];
            }
            out.push(acc);
        }
    }
    out
}

/// Half-pixel-centre bilinear resize written in the four-weight form.
pub fn bilinear_naive(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    let coord = |i: usize, s: usize, d: usize| {
        let c = ((i as f64 + 0.5) * s as f64 / d as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(s - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut out = vec![0.0; dw * dh];
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, sw, dw);
            out[y * dw + x] = (1.0 - fx) * (1.0 - fy) * src[y0 * sw + x0]
                + fx * (1.0 - fy) * src[y0 * sw + x1]
                + (1.0 - fx) * fy * src[y1 * sw + x0]
                + fx * fy * src[y1 * sw + x1];
        }
    }
    out
}

/// Every selected `(block, step, head)` slice recomputed from raw trace
/// arrays, resized and summed: one `[out_w·out_h]` map per token.
pub fn ovam_brute_force(
    trace: &DenoisingTrace,
    x: &TokenEmbeddingMatrix,
    steps: &[usize],
    out: (usize, usize),
) -> Vec<Vec<f64>> {
    let rows: Vec<Vec<f64>> = (0..x.len()).map(|k| x.row(k).to_vec()).collect();
    let mut maps = vec![vec![0.0; out.0 * out.1]; x.len()];
    for b in trace.blocks.iter().filter(|b| b.kind == BlockKind::Cross) {
        let w: Vec<f64> = trace.key_weights[&b.id].weights.iter().map(|v| *v as f64).collect();
        let keys = matmul_naive(&rows, &w, b.heads * b.head_dim);
        let bw = trace.latent_w.div_ceil(b.reduction);
        let bh = trace.latent_h.div_ceil(b.reduction);
        for &t in steps {
            let q: Vec<f64> = trace.queries[&(b.id.clone(), t)].data.iter().map(|v| *v as f64).collect();
            let a = attention_naive(&q, &keys, bw * bh, b.heads, b.head_dim, x.len());
            for h in 0..b.heads {
                for k in 0..x.len() {
                    let slice: Vec<f64> = (0..bw * bh).map(|p| a[(p * b.heads + h) * x.len() + k]).collect();
                    let r = bilinear_naive(&slice, bw, bh, out.0, out.1);
                    for i in 0..r.len() {
                        maps[k][i] += r[i];
                    }
                }
            }
        }
    }
    maps
}

/// Column sums over all full-resolution self blocks, heads and steps.
pub fn self_column_sums(trace: &DenoisingTrace) -> Vec<f64> {
    let n = trace.latent_w * trace.latent_h;
    let mut raw = vec![0.0; n];
    for b in trace.blocks.iter().filter(|b| b.kind == BlockKind::SelfAttn && b.reduction == 1) {
        for &t in &trace.timesteps {
            let sa = &trace.self_attn[&(b.id.clone(), t)];
            for h in 0..sa.heads {
                for col in 0..n {
                    for row in 0..n {
                        raw[col] += sa.data[(row * n + col) * sa.heads + h] as f64;
                    }
                }
            }
        }
    }
    raw
}

pub fn minmax_rescale(v: &[f64], alpha: f64) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::MAX, f64::min);
    let hi = v.iter().cloned().fold(f64::MIN, f64::max);
    v.iter()
        .map(|x| if hi > lo { alpha + (1.0 - alpha) * (x - lo) / (hi - lo) } else { 1.0 })
        .collect()
}

/// 100 random cases with varied shapes against the triple-loop softmax.
pub fn softmax_cases(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let pixels = rng.random_range(1..64);
        let heads = rng.random_range(1..5);
        let d = rng.random_range(1..17);
        let tokens = rng.random_range(1..9);
        let scale = rng.random_range(0.1..6.0);
        let q: Vec<f32> = (0..pixels * heads * d)
            .map(|_| (scale * rng.random_range(-1.0..1.0)) as f32)
            .collect();
        let k: Vec<f64> = (0..tokens * heads * d).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let qa = QueryArray::new(pixels, heads, d, q.clone()).unwrap();
        let ka = AttributionKeys {
            tokens,
            heads,
            head_dim: d,
            data: k.clone(),
        };
        let got = attention_matrix(&qa, &ka).unwrap();
        let qf: Vec<f64> = q.iter().map(|v| *v as f64).collect();
        let want = attention_naive(&qf, &k, pixels, heads, d, tokens);
        worst = worst.max(max_abs(&got.data, &want));
    }
    worst
}

/// Direct aggregation of what the denoiser attended to while synthesizing.
pub fn synthesis_aggregate(toy: &ToyDenoiser, prompt: &str, seed: u64) -> (Vec<Map2>, Vec<Map2>) {
    let mut cap = CrossAttentionCapture::default();
    let trace = toy.generate_with_hook(prompt, seed, 3, Some(&mut cap)).unwrap();
    let x = toy.encode_text(prompt).unwrap();
    let (w, h) = (trace.latent_w, trace.latent_h);
    let mut direct = vec![Map2::zeros(w, h); x.len()];
    for block in trace.cross_blocks() {
        let (bw, bh) = block.spatial(w, h);
        for &t in &trace.timesteps {
            let probs = &cap.maps[&(block.id.clone(), t)];
            for head in 0..block.heads {
                for (k, acc) in direct.iter_mut().enumerate() {
                    let r = resize_bilinear(&probs.slice(head, k, bw, bh).unwrap(), w, h).unwrap();
                    acc.add_assign(&r);
                }
            }
        }
    }
    let hm = compute_ovam(&trace, &x, &SelectionConfig::default()).unwrap();
    (hm.maps, direct)
}

// ------------------------------------------------------------ loss and metric

pub fn bce_naive(pred: &[Vec<f64>], gt: &[Vec<bool>]) -> f64 {
    let eps = 1e-7;
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let mut s = 0.0;
        for (pv, gv) in p.iter().zip(g) {
            let pv = pv.max(eps).min(1.0 - eps);
            s -= if *gv { pv.ln() } else { (1.0 - pv).ln() };
        }
        total += s / p.len() as f64;
    }
    total
}

/// `(tp, fp, fn)` by explicit loop.
pub fn counts_naive(pred: &BoolGrid, gt: &BoolGrid) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for y in 0..gt.height {
        for x in 0..gt.width {
            match (pred.get(x, y), gt.get(x, y)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    (tp, fp, fn_)
}

// ----------------------------------------------------------------- scenarios

pub const PLANTED_PROMPT: &str = "A photograph of a dog";
pub const PLANTED_TAU: f64 = 0.5;

pub struct PlantedRun {
    pub seed: u64,
    pub gt_area: f64,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub seconds: f64,
}

impl PlantedRun {
    pub fn ratio(&self) -> f64 {
        self.best_loss / self.initial_loss
    }
}

/// Ground truth from the heatmap of the known token `e* = [⟨SoT⟩, dog]`
/// thresholded at half its peak; training starts from `e*` plus uniform
/// noise of amplitude 0.01 and runs the default schedule.
pub fn planted_run(seed: u64) -> PlantedRun {
    let toy = ToyDenoiser::new();
    let start = Instant::now();
    let trace = Arc::new(toy.generate_with_trace(PLANTED_PROMPT, seed, 3).unwrap());
    let target = init_attribution_tokens("dog", &toy).unwrap();
    let (w, h) = trace.image_dims();
    let sel = SelectionConfig {
        output_size: Some((w, h)),
        normalization: Normalization::MeanOverSlices,
        ..Default::default()
    };
    let hm = compute_ovam(&trace, &target, &sel).unwrap();
    let m = &hm.maps[1];
    let peak = m.max();
    let g = BoolGrid::from_fn(w, h, |x, y| m.get(x, y) >= PLANTED_TAU * peak);
    let pair = TrainingPair::new(trace, GroundTruthMask::from_class_mask(g.clone())).unwrap();
    let mut init = target.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in init.data.iter_mut() {
        *v += 0.01 * rng.random_range(-1.0..1.0);
    }
    let res = optimize_tokens(&[pair], &init, &OptimizerConfig::default()).unwrap();
    PlantedRun {
        seed,
        gt_area: g.area_fraction(),
        initial_loss: res.loss_history[0],
        best_loss: res.best_loss,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// A training pair whose ground truth is the seed's object layout.
pub fn layout_pair(toy: &ToyDenoiser, prompt: &str, seed: u64) -> TrainingPair {
    let trace = Arc::new(toy.generate_with_trace(prompt, seed, 3).unwrap());
    let spec = toy.spec();
    let layout = toy_layout(seed, spec.latent_w, spec.latent_h);
    let (w, h) = trace.image_dims();
    let s = spec.image_scale;
    let g = BoolGrid::from_fn(w, h, |x, y| layout[(y / s) * spec.latent_w + x / s]);
    TrainingPair::new(trace, GroundTruthMask::from_class_mask(g)).unwrap()
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Central differences with step `h` on 20 random coordinates of a random
/// two-row `X′`. The relative error of a coordinate is
/// `|g − fd| / max(|g|, |fd|, 1e-8)`.
pub fn gradient_check(seed: u64, h: f64) -> GradCheck {
    let toy = ToyDenoiser::new();
    let pair = layout_pair(&toy, PLANTED_PROMPT, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let l_e = toy.embed_dim();
    let data: Vec<f64> = (0..2 * l_e).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = TokenEmbeddingMatrix::new(l_e, data, vec!["bg".into(), "fg".into()]).unwrap();
    let cfg = OptimizerConfig::default();
    let pairs = [pair];
    let g = gradient(&pairs, &x, &cfg).unwrap();
    let obj = Objective::new(&pairs, 2, &cfg.objective_selection()).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let i = rng.random_range(0..x.data.len());
        let mut plus = x.clone();
        plus.data[i] += h;
        let mut minus = x.clone();
        minus.data[i] -= h;
        let fd = (obj.loss(&plus).unwrap() - obj.loss(&minus).unwrap()) / (2.0 * h);
        let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    GradCheck {
        max_rel_error: worst,
        checked: 20,
    }
}

/// Random `[w, h]` map with entries in `[0, 1)`.
pub fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Map2 {
    Map2::from_vec(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Three-class fixture on disk: random predicted and ground-truth masks of
/// varying sizes, two to four images per class. Returns the manifest and the
/// ground-truth directory; mask paths are relative to `root`.
pub fn three_class_fixture(root: &std::path::Path, seed: u64) -> (ovam_core::DatasetManifest, std::path::PathBuf) {
    use ovam_core::dataset::{DropReason, ManifestEntry};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt_dir = root.join("gt");
    std::fs::create_dir_all(root.join("masks")).unwrap();
    std::fs::create_dir_all(&gt_dir).unwrap();
    let mut entries = Vec::new();
    for class in ["bird", "cat", "dog"] {
        for _ in 0..rng.random_range(2..5) {
            let id = entries.len() as u64;
            let (w, h) = (rng.random_range(4..20), rng.random_range(4..20));
            let p_fg = rng.random_range(0.1..0.9);
            let mut pred = BoolGrid::new(w, h);
            let mut gt = BoolGrid::new(w, h);
            for i in 0..w * h {
                pred.data[i] = rng.random_bool(p_fg);
                gt.data[i] = rng.random_bool(p_fg);
            }
            let mask_path = format!("masks/{id:06}.png");
            pred.save_png(&root.join(&mask_path)).unwrap();
            gt.save_png(&gt_dir.join(format!("{id:06}.png"))).unwrap();
            entries.push(ManifestEntry {
                id,
                class: class.into(),
                prompt: format!("A photograph of a {class}"),
                seed: id,
                image_path: format!("images/{id:06}.png"),
                mask_path,
                clip_score: None,
                area_fraction: pred.area_fraction(),
                kept: true,
                drop_reason: DropReason::None,
                error: None,
            });
        }
    }
    (
        ovam_core::DatasetManifest {
            entries,
            filters: vec![],
        },
        gt_dir,
    )
}

/// Per-class IoU from summed loop counts, then the plain mean.
pub fn miou_oracle(manifest: &ovam_core::DatasetManifest, root: &std::path::Path, gt_dir: &std::path::Path) -> (std::collections::BTreeMap<String, f64>, f64) {
    let mut sums: std::collections::BTreeMap<String, (u64, u64, u64)> = Default::default();
    for e in manifest.entries.iter().filter(|e| e.kept) {
        let pred = BoolGrid::load_png(&root.join(&e.mask_path)).unwrap();
        let gt = BoolGrid::load_png(&gt_dir.join(format!("{:06}.png", e.id))).unwrap();
        let (tp, fp, fn_) = counts_naive(&pred, &gt);
        let s = sums.entry(e.class.clone()).or_default();
        s.0 += tp;
        s.1 += fp;
        s.2 += fn_;
    }
    let per: std::collections::BTreeMap<String, f64> = sums
        .into_iter()
        .map(|(c, (tp, fp, fn_))| (c, tp as f64 / (tp + fp + fn_) as f64))
        .collect();
    let mean = per.values().sum::<f64>() / per.len() as f64;
    (per, mean)
}

// ------------------------------------------------------- mask property scans

/// True when every `(map, τ₁ ≤ τ₂)` draw yields nested masks.
pub fn nesting_holds(n_maps: usize, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_maps {
        let (w, h) = (rng.random_range(1..24), rng.random_range(1..24));
        let m = random_map(&mut rng, w, h);
        let mut taus: Vec<f64> = (0..4).map(|_| rng.random_range(0.001..=1.0)).collect();
        taus.sort_by(f64::total_cmp);
        let masks: Vec<BoolGrid> = taus.iter().map(|t| binarize(&m, None, *t).unwrap()).collect();
        for pair in masks.windows(2) {
            if pair[1].data.iter().zip(&pair[0].data).any(|(hi, lo)| *hi && !*lo) {
                return false;
            }
        }
    }
    true
}

/// Rescaled random maps stay in `[α, 1]` and attain both ends.
pub fn rescale_endpoints_hold(n_maps: usize, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_maps).all(|_| {
        let (w, h) = (rng.random_range(2..16), rng.random_range(1..16));
        let m = random_map(&mut rng, w, h);
        let alpha = rng.random_range(0.01..=1.0);
        let got = rescale(&m, alpha);
        let want = minmax_rescale(&m.data, alpha);
        max_abs(&got.data, &want) < 1e-12
            && got.min() == alpha
            && got.max() == 1.0
            && got.data.iter().all(|v| (alpha..=1.0).contains(v))
    })
}

/// Pixel-exact agreement of `binarize` with `[D ⊙ A ≥ τ·max]`.
pub fn binarize_matches_indicator(n_maps: usize, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_maps).all(|_| {
        let (w, h) = (rng.random_range(1..16), rng.random_range(1..16));
        let d = random_map(&mut rng, w, h);
        let a = random_map(&mut rng, w, h);
        let tau = rng.random_range(0.01..=1.0);
        let got = binarize(&d, Some(&a), tau).unwrap();
        let combined: Vec<f64> = d.data.iter().zip(&a.data).map(|(x, y)| x * y).collect();
        let m = combined.iter().cloned().fold(0.0, f64::max);
        combined
            .iter()
            .zip(&got.data)
            .all(|(c, g)| *g == (m > 0.0 && *c >= tau * m))
    })
}

// ----------------------------------------------------------- filter fixtures

pub fn synthetic(classes: &[(&str, usize)], area: impl Fn(u64) -> f64) -> DatasetManifest {
    let mut entries = Vec::new();
    for (class, n) in classes {
        for _ in 0..*n {
            let id = entries.len() as u64;
            entries.push(ManifestEntry {
                id,
                class: class.to_string(),
                prompt: format!("A photograph of a {class}"),
                seed: id,
                image_path: format!("images/{id:06}.png"),
                mask_path: format!("masks/{id:06}.png"),
                clip_score: None,
                area_fraction: area(id),
                kept: true,
                drop_reason: DropReason::None,
                error: None,
            });
        }
    }
    DatasetManifest {
        entries,
        filters: vec![],
    }
}

pub fn dropped(m: &DatasetManifest, reason: DropReason) -> Vec<u64> {
    m.entries.iter().filter(|e| e.drop_reason == reason).map(|e| e.id).collect()
}

pub fn conserved(m: &DatasetManifest) -> bool {
    let kept = m.entries.iter().filter(|e| e.kept).count();
    let gone = m.entries.iter().filter(|e| !e.kept).count();
    kept + gone == m.entries.len() && m.check().is_ok()
}

/// Scores are `(id · 7) mod 10` within each class of ten.
pub fn clip_drops_bottom_thirty_percent() -> bool {
    let m = synthetic(&[("dog", 10), ("cat", 10)], |_| 0.5);
    let scorer = FnScorer(|e: &ManifestEntry, _: &str| ((e.id * 7) % 10) as f64);
    let f = clip_filter(&m, Some(&scorer), 0.7, "A photograph of a {classname}", Path::new(".")).unwrap();
    // Oracle: per class, sort (score, id) and cut the first three.
    let mut want = Vec::new();
    for class in ["cat", "dog"] {
        let mut s: Vec<(u64, u64)> = m
            .entries
            .iter()
            .filter(|e| e.class == class)
            .map(|e| ((e.id * 7) % 10, e.id))
            .collect();
        s.sort();
        want.extend(s[..3].iter().map(|p| p.1));
    }
    want.sort();
    dropped(&f, DropReason::ClipBottom) == want && conserved(&f)
}

pub fn area_filter_matches_oracle() -> bool {
    let areas = [0.0, 0.04, 0.049999, 0.05, 0.5, 0.95, 0.950001, 0.96, 1.0];
    let m = synthetic(&[("dog", areas.len())], |id| areas[id as usize]);
    let f = area_filter(&m, 0.05, 0.95).unwrap();
    dropped(&f, DropReason::AreaLow) == vec![0, 1, 2]
        && dropped(&f, DropReason::AreaHigh) == vec![6, 7, 8]
        && conserved(&f)
}

