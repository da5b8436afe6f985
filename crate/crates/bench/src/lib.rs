//! Fixtures for the criterion benchmarks, all on the toy backend.

use std::sync::Arc;

use ovam_core::backend::{Denoiser, ToyDenoiser};
use ovam_core::optimizer::{GroundTruthMask, TrainingPair};
use ovam_core::raster::BoolGrid;
use ovam_core::DenoisingTrace;

pub const PROMPT: &str = "A photograph of a dog";

pub fn trace(seed: u64, steps: usize) -> DenoisingTrace {
    ToyDenoiser::new()
        .generate_with_trace(PROMPT, seed, steps)
        .expect("toy generation")
}

/// A trace paired with its own object layout as the class mask.
pub fn layout_pair(seed: u64) -> TrainingPair {
    let toy = ToyDenoiser::new();
    let spec = toy.spec();
    let layout = toy.layout(seed);
    let (iw, ih) = spec.image_dims();
    let small = BoolGrid::from_fn(spec.latent_w, spec.latent_h, |x, y| layout[y * spec.latent_w + x]);
    let gt = GroundTruthMask::from_class_mask(small.resize_nearest(iw, ih));
    TrainingPair::new(Arc::new(trace(seed, 3)), gt).expect("layout pair")
}
