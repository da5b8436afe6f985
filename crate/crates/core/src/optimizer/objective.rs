//! BCE objective over attribution maps and its exact gradient.
//!
//! Forward: per pair, mean-over-slices attribution maps at the selection's
//! output size, bilinearly resized to the ground-truth size, scored with a
//! clamped per-pixel BCE (mean over pixels, sum over tokens, sum over pairs).
//!
//! Backward runs the same chain in reverse: clamped-BCE derivative, adjoint
//! resizes, softmax Jacobian per `(pixel, head)` row, then the transposed key
//! projection back onto the embedding rows.

use std::sync::Arc;

use super::{GroundTruthMask, OptimizerConfig};
use crate::backend::{DenoisingTrace, TokenEmbeddingMatrix};
use crate::error::{OvamError, Result};
use crate::ovam::{
    attention_matrix, project_attribution_keys, BilinearPlan, Normalization, OvamHeatmap,
    ResolvedSelection, SelectionConfig,
};
use crate::raster::Map2;

/// Probability clamp used inside the BCE.
pub const BCE_EPSILON: f64 = 1e-7;

/// One generated image and its per-token ground truth.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub trace: Arc<DenoisingTrace>,
    pub ground_truth: GroundTruthMask,
}

impl TrainingPair {
    pub fn new(trace: Arc<DenoisingTrace>, ground_truth: GroundTruthMask) -> Result<Self> {
        let dims = trace.image_dims();
        if ground_truth.dims() != dims {
            return Err(OvamError::dim(
                "ground truth size",
                format!("{dims:?}"),
                format!("{:?}", ground_truth.dims()),
            ));
        }
        Ok(TrainingPair {
            trace,
            ground_truth,
        })
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON)
}

/// `Σ_k mean_pixels BCE(D_k, G_k)` with probabilities clamped to `[ε, 1−ε]`.
///
/// `heatmap` must be mean-normalized and already at the ground-truth size.
pub fn bce_loss(heatmap: &OvamHeatmap, gt: &GroundTruthMask) -> Result<f64> {
    if heatmap.normalization != Normalization::MeanOverSlices {
        return Err(OvamError::InvalidArgument(
            "BCE needs a mean-over-slices heatmap".into(),
        ));
    }
    if heatmap.maps.len() != gt.channels.len() {
        return Err(OvamError::dim(
            "ground-truth channels",
            heatmap.maps.len(),
            gt.channels.len(),
        ));
    }
    if heatmap.dims() != gt.dims() {
        return Err(OvamError::dim(
            "heatmap vs ground truth size",
            format!("{:?}", gt.dims()),
            format!("{:?}", heatmap.dims()),
        ));
    }
    Ok(heatmap
        .maps
        .iter()
        .zip(&gt.channels)
        .map(|(d, g)| channel_bce(&d.data, &g.data))
        .sum())
}

fn channel_bce(d: &[f64], g: &[bool]) -> f64 {
    let mut acc = 0.0;
    for (&p, &t) in d.iter().zip(g) {
        let p = clamp_prob(p);
        acc -= if t { p.ln() } else { (1.0 - p).ln() };
    }
    acc / d.len() as f64
}

struct PairPlan {
    pair: TrainingPair,
    selection: ResolvedSelection,
    block_plans: Vec<BilinearPlan>,
    to_gt: BilinearPlan,
}

/// The training objective with all per-pair resampling plans prepared.
pub struct Objective {
    plans: Vec<PairPlan>,
    n_tokens: usize,
    embed_dim: usize,
}

impl Objective {
    pub fn new(pairs: &[TrainingPair], n_tokens: usize, selection: &SelectionConfig) -> Result<Self> {
        if pairs.is_empty() {
            return Err(OvamError::InvalidArgument("no training pairs".into()));
        }
        let embed_dim = pairs[0].trace.embed_dim;
        let mut plans = Vec::with_capacity(pairs.len());
        for pair in pairs {
            if pair.ground_truth.channels.len() != n_tokens {
                return Err(OvamError::dim(
                    "ground-truth channels",
                    n_tokens,
                    pair.ground_truth.channels.len(),
                ));
            }
            if pair.trace.embed_dim != embed_dim {
                return Err(OvamError::dim("trace embedding width", embed_dim, pair.trace.embed_dim));
            }
            let resolved = selection.resolve(&pair.trace)?;
            let block_plans = resolved
                .blocks
                .iter()
                .map(|b| {
                    BilinearPlan::new(
                        b.spatial(pair.trace.latent_w, pair.trace.latent_h),
                        resolved.output_size,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let to_gt = BilinearPlan::new(resolved.output_size, pair.ground_truth.dims())?;
            plans.push(PairPlan {
                pair: pair.clone(),
                selection: resolved,
                block_plans,
                to_gt,
            });
        }
        Ok(Objective {
            plans,
            n_tokens,
            embed_dim,
        })
    }

    fn check_tokens(&self, tokens: &TokenEmbeddingMatrix) -> Result<()> {
        if tokens.len() != self.n_tokens {
            return Err(OvamError::dim("attribution tokens", self.n_tokens, tokens.len()));
        }
        if tokens.embed_dim != self.embed_dim {
            return Err(OvamError::dim("attribution embedding width", self.embed_dim, tokens.embed_dim));
        }
        Ok(())
    }

    /// Mean-normalized maps of one pair at the ground-truth size.
    pub fn heatmap_at_gt(&self, pair_index: usize, tokens: &TokenEmbeddingMatrix) -> Result<OvamHeatmap> {
        self.check_tokens(tokens)?;
        let plan = &self.plans[pair_index];
        let out = self.forward_out(plan, tokens)?;
        let (gw, gh) = plan.to_gt.dst();
        let maps = out
            .iter()
            .map(|m| {
                let mut r = Map2::zeros(gw, gh);
                plan.to_gt.apply_into(&m.data, &mut r.data);
                r
            })
            .collect();
        Ok(OvamHeatmap {
            maps,
            labels: tokens.labels.clone(),
            normalization: Normalization::MeanOverSlices,
            slices: plan.selection.slice_count(),
        })
    }

    fn forward_out(&self, plan: &PairPlan, tokens: &TokenEmbeddingMatrix) -> Result<Vec<Map2>> {
        let trace = &plan.pair.trace;
        let (ow, oh) = plan.selection.output_size;
        let mut maps = vec![Map2::zeros(ow, oh); tokens.len()];
        let mut slice = Map2::zeros(ow, oh);
        for (block, rs) in plan.selection.blocks.iter().zip(&plan.block_plans) {
            let keys = project_attribution_keys(tokens, block, trace.key_projection(&block.id)?)?;
            let mut src = vec![0.0; rs.src().0 * rs.src().1];
            let heads = plan.selection.heads_for(block);
            for &step in &plan.selection.steps {
                let probs = attention_matrix(trace.query(&block.id, step)?, &keys)?;
                for &h in &heads {
                    for (k, acc) in maps.iter_mut().enumerate() {
                        for (p, s) in src.iter_mut().enumerate() {
                            *s = probs.get(p, h, k);
                        }
                        rs.apply_into(&src, &mut slice.data);
                        acc.add_assign(&slice);
                    }
                }
            }
        }
        let inv = 1.0 / plan.selection.slice_count() as f64;
        for m in &mut maps {
            m.scale(inv);
        }
        Ok(maps)
    }

    pub fn loss(&self, tokens: &TokenEmbeddingMatrix) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..self.plans.len() {
            let hm = self.heatmap_at_gt(i, tokens)?;
            total += bce_loss(&hm, &self.plans[i].pair.ground_truth)?;
        }
        Ok(total)
    }

    /// Loss and its gradient with respect to every embedding entry.
    pub fn loss_and_gradient(&self, tokens: &TokenEmbeddingMatrix) -> Result<(f64, Vec<f64>)> {
        self.check_tokens(tokens)?;
        let mut grad = vec![0.0; tokens.data.len()];
        let mut total = 0.0;
        for plan in &self.plans {
            total += self.pair_backward(plan, tokens, &mut grad)?;
        }
        Ok((total, grad))
    }

    fn pair_backward(
        &self,
        plan: &PairPlan,
        tokens: &TokenEmbeddingMatrix,
        grad: &mut [f64],
    ) -> Result<f64> {
        let trace = &plan.pair.trace;
        let gt = &plan.pair.ground_truth;
        let out = self.forward_out(plan, tokens)?;
        let (gw, gh) = gt.dims();
        let n_gt = (gw * gh) as f64;
        let (ow, oh) = plan.selection.output_size;
        let slices = plan.selection.slice_count() as f64;

        // dL/dD at the output size, per token.
        let mut loss = 0.0;
        let mut d_out = vec![vec![0.0; ow * oh]; tokens.len()];
        let mut up = vec![0.0; gw * gh];
        let mut d_up = vec![0.0; gw * gh];
        for (k, map) in out.iter().enumerate() {
            plan.to_gt.apply_into(&map.data, &mut up);
            let target = &gt.channels[k].data;
            let mut acc = 0.0;
            for ((&p, &t), dg) in up.iter().zip(target).zip(d_up.iter_mut()) {
                let pc = clamp_prob(p);
                acc -= if t { pc.ln() } else { (1.0 - pc).ln() };
                *dg = if !(BCE_EPSILON..=1.0 - BCE_EPSILON).contains(&p) {
                    0.0
                } else if t {
                    -1.0 / (p * n_gt)
                } else {
                    1.0 / ((1.0 - p) * n_gt)
                };
            }
            loss += acc / n_gt;
            plan.to_gt.adjoint_add(&d_up, &mut d_out[k]);
        }

        let embed_dim = tokens.embed_dim;
        for (block, rs) in plan.selection.blocks.iter().zip(&plan.block_plans) {
            let kp = trace.key_projection(&block.id)?;
            let keys = project_attribution_keys(tokens, block, kp)?;
            let pixels = rs.src().0 * rs.src().1;
            // dL/dA for any slice of this block: (1/S) Rᵀ dL/dD_out, [token][pixel].
            let d_slice: Vec<Vec<f64>> = d_out
                .iter()
                .map(|g| {
                    let mut s = vec![0.0; pixels];
                    rs.adjoint_add(g, &mut s);
                    s.iter_mut().for_each(|v| *v /= slices);
                    s
                })
                .collect();
            let heads = plan.selection.heads_for(block);
            let hd = block.head_dim;
            let inv_sqrt_d = 1.0 / (hd as f64).sqrt();
            // dL/dK′, [token, head, c].
            let mut d_keys = vec![0.0; tokens.len() * block.heads * hd];
            let mut dz = vec![0.0; tokens.len()];
            for &step in &plan.selection.steps {
                let q = trace.query(&block.id, step)?;
                let probs = attention_matrix(q, &keys)?;
                for &h in &heads {
                    for p in 0..pixels {
                        let a = probs.row(p, h);
                        let mut inner = 0.0;
                        for (k, &ak) in a.iter().enumerate() {
                            inner += ak * d_slice[k][p];
                        }
                        for (k, &ak) in a.iter().enumerate() {
                            dz[k] = ak * (d_slice[k][p] - inner) * inv_sqrt_d;
                        }
                        let qv = q.vector(p, h);
                        for (k, &dzk) in dz.iter().enumerate() {
                            if dzk == 0.0 {
                                continue;
                            }
                            let base = (k * block.heads + h) * hd;
                            for (c, &qc) in qv.iter().enumerate() {
                                d_keys[base + c] += dzk * qc as f64;
                            }
                        }
                    }
                }
            }
            for k in 0..tokens.len() {
                let gk = &mut grad[k * embed_dim..(k + 1) * embed_dim];
                for h in 0..block.heads {
                    for c in 0..hd {
                        let dk = d_keys[(k * block.heads + h) * hd + c];
                        if dk == 0.0 {
                            continue;
                        }
                        for (g, w) in gk.iter_mut().zip(kp.row(h, c)) {
                            *g += *w as f64 * dk;
                        }
                    }
                }
            }
        }
        Ok(loss)
    }
}

/// Exact gradient of the training objective at `tokens`.
pub fn gradient(
    pairs: &[TrainingPair],
    tokens: &TokenEmbeddingMatrix,
    cfg: &OptimizerConfig,
) -> Result<Vec<f64>> {
    let objective = Objective::new(pairs, tokens.len(), &cfg.objective_selection())?;
    Ok(objective.loss_and_gradient(tokens)?.1)
}
