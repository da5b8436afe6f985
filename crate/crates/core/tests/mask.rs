mod common;

use std::path::PathBuf;

use common::*;
use image::{Rgb, RgbImage};
use ovam_core::backend::{Denoiser, ToyDenoiser};
use ovam_core::mask::{
    binarize, dense_crf, fuse_self_attention, make_pseudo_mask, rescale, write_mask,
    BinarizationParams, CrfParams, DenseCrfRefiner, ExternalRefiner, IdentityRefiner, Refiner,
};
use ovam_core::optimizer::init_attribution_tokens;
use ovam_core::ovam::{compute_ovam, resize_bilinear, SelectionConfig};
use ovam_core::raster::{BoolGrid, Map2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Strategy for small non-negative maps.
fn map_strategy() -> impl Strategy<Value = Map2> {
    (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
        proptest::collection::vec(0.0f64..10.0, w * h)
            .prop_map(move |d| Map2::from_vec(w, h, d).unwrap())
    })
}

proptest! {
    #[test]
    fn rescale_attains_both_endpoints(m in map_strategy(), alpha in 0.01f64..=1.0) {
        let r = rescale(&m, alpha);
        if m.max() > m.min() {
            prop_assert_eq!(r.min(), alpha);
            prop_assert_eq!(r.max(), 1.0);
            prop_assert_eq!(r.data[m.argmax()], 1.0);
        } else {
            prop_assert!(r.data.iter().all(|v| *v == 1.0));
        }
        prop_assert!(r.data.iter().all(|v| (alpha..=1.0).contains(v)));
    }

    #[test]
    fn binarize_is_the_indicator(d in map_strategy(), tau in 0.01f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_map(&mut rng, d.width, d.height);
        let got = binarize(&d, Some(&a), tau).unwrap();
        let combined: Vec<f64> = d.data.iter().zip(&a.data).map(|(x, y)| x * y).collect();
        let m = combined.iter().cloned().fold(0.0, f64::max);
        for (i, c) in combined.iter().enumerate() {
            prop_assert_eq!(got.data[i], m > 0.0 && *c >= tau * m);
        }
        if m > 0.0 {
            let peak = combined.iter().position(|c| *c == m).unwrap();
            prop_assert!(got.data[peak]);
        }
    }
}

#[test]
fn threshold_nesting_on_1000_maps() {
    assert!(nesting_holds(1000, 17));
}

#[test]
fn rescale_example_and_degenerate_alpha() {
    let m = Map2::from_vec(3, 1, vec![0.0, 2.0, 4.0]).unwrap();
    let r = rescale(&m, 0.85);
    assert!((r.data[1] - 0.925).abs() < 1e-12);
    assert_eq!((r.data[0], r.data[2]), (0.85, 1.0));
    assert!(rescale(&m, 1.0).data.iter().all(|v| *v == 1.0));
}

#[test]
fn binarize_examples() {
    let c = Map2::from_vec(3, 1, vec![0.1, 0.5, 1.0]).unwrap();
    assert_eq!(binarize(&c, None, 0.4).unwrap().data, vec![false, true, true]);
    assert_eq!(binarize(&c, None, 1.0).unwrap().data, vec![false, false, true]);
    let flat = Map2::filled(4, 3, 0.3);
    assert!(binarize(&flat, None, 0.9).unwrap().data.iter().all(|v| *v));
    assert_eq!(binarize(&Map2::zeros(2, 2), None, 0.5).unwrap().count(), 0);
    assert!(binarize(&c, None, 0.0).is_err());
    assert!(binarize(&c, Some(&Map2::zeros(2, 1)), 0.5).is_err());
}

#[test]
fn fused_self_attention_matches_loop_oracle() {
    let toy = ToyDenoiser::new();
    let trace = toy.generate_with_trace("A photograph of a dog", 5, 3).unwrap();
    for alpha in [0.85, 0.95] {
        let got = fuse_self_attention(&trace, alpha).unwrap();
        let want = minmax_rescale(&self_column_sums(&trace), alpha);
        assert!(max_abs(&got.data, &want) < 1e-5);
        assert_eq!(got.min(), alpha);
        assert_eq!(got.max(), 1.0);
    }
}

#[test]
fn missing_self_attention_is_a_config_error() {
    let toy = ToyDenoiser::new();
    let mut trace = toy.generate_with_trace("dog", 0, 2).unwrap();
    trace.self_attn.clear();
    assert!(matches!(
        fuse_self_attention(&trace, 0.85),
        Err(ovam_core::OvamError::Config(_))
    ));
}

#[test]
fn plain_pipeline_is_threshold_of_upscaled_heatmap() {
    let toy = ToyDenoiser::new();
    let trace = toy.generate_with_trace("A photograph of a cat", 3, 3).unwrap();
    let x = toy.encode_text("cat").unwrap();
    let params = BinarizationParams {
        use_self_attention: false,
        use_crf: false,
        ..BinarizationParams::non_optimized()
    };
    let mask = make_pseudo_mask(&trace, &x, 1, &params, &IdentityRefiner).unwrap();
    let d = &compute_ovam(&trace, &x, &SelectionConfig::default()).unwrap().maps[1];
    let (w, h) = trace.image_dims();
    let want = binarize(&resize_bilinear(d, w, h).unwrap(), None, 0.4).unwrap();
    assert_eq!(mask.grid, want);
    assert_eq!(mask.area_fraction, want.count() as f64 / (w * h) as f64);

    let latent = BinarizationParams {
        threshold_at_latent: true,
        ..params
    };
    let coarse = make_pseudo_mask(&trace, &x, 1, &latent, &IdentityRefiner).unwrap();
    assert_eq!(coarse.grid, binarize(d, None, 0.4).unwrap().resize_nearest(w, h));
}

#[test]
fn self_attention_product_is_used() {
    let toy = ToyDenoiser::new();
    let trace = toy.generate_with_trace("A photograph of a cat", 8, 3).unwrap();
    let x = toy.encode_text("cat").unwrap();
    let params = BinarizationParams {
        use_crf: false,
        ..BinarizationParams::non_optimized()
    };
    let mask = make_pseudo_mask(&trace, &x, 1, &params, &IdentityRefiner).unwrap();
    let d = &compute_ovam(&trace, &x, &SelectionConfig::default()).unwrap().maps[1];
    let a = fuse_self_attention(&trace, 0.85).unwrap();
    let (w, h) = trace.image_dims();
    let combined = resize_bilinear(&d.hadamard(&a).unwrap(), w, h).unwrap();
    assert_eq!(mask.grid, binarize(&combined, None, 0.4).unwrap());
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/planted_mask.png")
}

/// PNG of the optimized-token mask of the planted `dog` token, CRF on.
pub fn planted_mask_png() -> Vec<u8> {
    let toy = ToyDenoiser::new();
    let trace = toy.generate_with_trace(PLANTED_PROMPT, 0, 3).unwrap();
    let x = init_attribution_tokens("dog", &toy).unwrap();
    let refiner = DenseCrfRefiner::default();
    let mask = make_pseudo_mask(&trace, &x, 1, &BinarizationParams::optimized(), &refiner).unwrap();
    mask.grid.to_png_bytes().unwrap()
}

#[test]
fn planted_mask_matches_golden_file() {
    let png = planted_mask_png();
    assert_eq!(png, planted_mask_png());
    let path = golden_path();
    if std::env::var_os("OVAM_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &png).unwrap();
    }
    let golden = std::fs::read(&path).expect("golden file missing; run once with OVAM_BLESS=1");
    assert_eq!(png, golden);
}

#[test]
fn identity_refiner_is_a_no_op() {
    let img = RgbImage::from_pixel(8, 6, Rgb([9, 9, 9]));
    let m = BoolGrid::from_fn(8, 6, |x, y| (x + y) % 3 == 0);
    assert_eq!(IdentityRefiner.refine(&img, &m).unwrap(), m);
}

#[test]
fn missing_external_refiner_falls_back_to_identity() {
    let r = ExternalRefiner {
        program: "/nonexistent/ovam-refiner".into(),
        args: vec![],
    };
    let img = RgbImage::from_pixel(8, 6, Rgb([9, 9, 9]));
    let m = BoolGrid::from_fn(8, 6, |x, _| x < 3);
    assert_eq!(r.refine(&img, &m).unwrap(), m);
}

/// Uniform-colour fixture: refined area over input area for each mask shape.
pub fn uniform_area_ratios(size: usize) -> Vec<(&'static str, f64)> {
    let img = RgbImage::from_pixel(size as u32, size as u32, Rgb([120, 120, 120]));
    let c = size as f64 / 2.0;
    let shapes: Vec<(&'static str, BoolGrid)> = vec![
        ("half", BoolGrid::from_fn(size, size, |x, _| x < size / 2)),
        ("square", BoolGrid::from_fn(size, size, |x, y| {
            (size / 4..3 * size / 4).contains(&x) && (size / 4..3 * size / 4).contains(&y)
        })),
        ("corner", BoolGrid::from_fn(size, size, |x, y| x < size / 4 && y < size / 4)),
        ("disc", BoolGrid::from_fn(size, size, |x, y| {
            (x as f64 - c).powi(2) + (y as f64 - c).powi(2) < (size as f64 / 3.0).powi(2)
        })),
    ];
    shapes
        .into_iter()
        .map(|(name, m)| {
            let out = dense_crf(&img, &m, &CrfParams::default()).unwrap();
            (name, out.area_fraction() / m.area_fraction())
        })
        .collect()
}

#[test]
fn uniform_image_keeps_area_within_twenty_percent() {
    for (name, ratio) in uniform_area_ratios(512) {
        assert!((0.8..=1.2).contains(&ratio), "{name}: {ratio}");
    }
}

/// Worst per-row distance between the refined boundary and a colour edge,
/// for a mask shifted `shift` pixels off that edge.
pub fn two_tone_offset(size: usize, shift: i64) -> i64 {
    let edge = size as i64 / 2;
    let img = RgbImage::from_fn(size as u32, size as u32, |x, _| {
        if (x as i64) < edge {
            Rgb([40, 50, 60])
        } else {
            Rgb([200, 190, 180])
        }
    });
    let m = BoolGrid::from_fn(size, size, |x, _| x as i64 >= edge + shift);
    let out = dense_crf(&img, &m, &CrfParams::default()).unwrap();
    assert_eq!(out.dims(), (size, size));
    (0..size)
        .map(|y| {
            let first = (0..size).find(|&x| out.get(x, y)).map_or(size as i64, |x| x as i64);
            (first - edge).abs()
        })
        .max()
        .unwrap()
}

#[test]
fn two_tone_boundary_snaps_to_edge() {
    for size in [64, 256] {
        for shift in [-2, 2] {
            assert!(two_tone_offset(size, shift) <= 1, "size {size} shift {shift}");
        }
    }
}

#[test]
fn mask_png_and_sidecar_written() {
    let dir = tempfile::tempdir().unwrap();
    let grid = BoolGrid::from_fn(4, 4, |x, _| x == 0);
    let mask = ovam_core::BinaryMask::new(grid.clone(), "dog");
    let png = dir.path().join("m.png");
    write_mask(&png, &mask, &BinarizationParams::optimized()).unwrap();
    let img = image::open(&png).unwrap().to_luma8();
    assert_eq!(img.get_pixel(0, 0).0[0], 255);
    assert_eq!(img.get_pixel(1, 0).0[0], 0);
    let side: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(side["class"], "dog");
    assert_eq!(side["tau"], 0.8);
    assert_eq!(side["area_fraction"], 0.25);
}
