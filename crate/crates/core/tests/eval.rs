mod common;

use std::collections::BTreeMap;

use common::*;
use ovam_core::eval::{evaluate_dataset, iou, report, Counts};
use ovam_core::raster::BoolGrid;
use proptest::prelude::*;

#[test]
fn three_class_fixture_matches_loop_oracle() {
    for seed in 0..5 {
        let dir = tempfile::tempdir().unwrap();
        let (m, gt) = three_class_fixture(dir.path(), seed);
        let r = evaluate_dataset(&m, dir.path(), &gt, &[]).unwrap();
        let (per, miou) = miou_oracle(&m, dir.path(), &gt);
        assert!((r.miou - miou).abs() < 1e-9);
        for (c, v) in per {
            assert!((r.per_class[&c].iou - v).abs() < 1e-9);
        }
        assert_eq!(r.class_order, vec!["bird", "cat", "dog"]);
        assert!(r.missing_gt.is_empty());
    }
}

#[test]
fn one_third_case_is_exact() {
    let pred = BoolGrid::from_fn(2, 2, |x, y| (x, y) == (0, 0) || (x, y) == (0, 1));
    let gt = BoolGrid::from_fn(2, 2, |x, y| (x, y) == (0, 1) || (x, y) == (1, 1));
    assert_eq!(iou(&pred, &gt).unwrap(), (1, 1, 1, 1.0 / 3.0));
}

#[test]
fn single_image_per_class_reduces_to_iou() {
    let dir = tempfile::tempdir().unwrap();
    let (mut m, gt) = three_class_fixture(dir.path(), 9);
    let mut seen = std::collections::BTreeSet::new();
    m.entries.retain(|e| seen.insert(e.class.clone()));
    let r = evaluate_dataset(&m, dir.path(), &gt, &[]).unwrap();
    for e in &m.entries {
        let pred = BoolGrid::load_png(&dir.path().join(&e.mask_path)).unwrap();
        let g = BoolGrid::load_png(&gt.join(format!("{:06}.png", e.id))).unwrap();
        assert_eq!(r.per_class[&e.class].iou, iou(&pred, &g).unwrap().3);
    }
}

#[test]
fn duplicated_images_leave_iou_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let (m, gt) = three_class_fixture(dir.path(), 3);
    let once = evaluate_dataset(&m, dir.path(), &gt, &[]).unwrap();
    let twice_entries: Vec<_> = m.entries.iter().chain(&m.entries).cloned().collect();
    let twice = ovam_core::DatasetManifest {
        entries: twice_entries,
        filters: vec![],
    };
    let r = evaluate_dataset(&twice, dir.path(), &gt, &[]).unwrap();
    for (c, v) in &once.per_class {
        assert_eq!(r.per_class[c].iou, v.iou);
        assert_eq!(r.per_class[c].counts.tp, 2 * v.counts.tp);
    }
}

#[test]
fn missing_ground_truth_is_listed_and_absent_classes_excluded() {
    let dir = tempfile::tempdir().unwrap();
    let (m, gt) = three_class_fixture(dir.path(), 1);
    let dogs: Vec<u64> = m.entries.iter().filter(|e| e.class == "dog").map(|e| e.id).collect();
    for id in &dogs {
        std::fs::remove_file(gt.join(format!("{id:06}.png"))).unwrap();
    }
    let classes: Vec<String> = ["bird", "cat", "dog", "cow"].iter().map(|s| s.to_string()).collect();
    let r = evaluate_dataset(&m, dir.path(), &gt, &classes).unwrap();
    assert_eq!(r.missing_gt.len(), dogs.len());
    assert_eq!(r.absent, vec!["dog".to_string(), "cow".to_string()]);
    let mean = (r.per_class["bird"].iou + r.per_class["cat"].iou) / 2.0;
    assert_eq!(r.miou, mean);
    let table = r.table();
    assert!(table.contains("mIoU") && table.contains("cow"));
}

#[test]
fn empty_union_is_one_and_flagged() {
    let counts = BTreeMap::from([("dog".to_string(), Counts::default())]);
    let n = BTreeMap::from([("dog".to_string(), 1)]);
    let r = report(counts, n, vec!["dog".into()], vec![]);
    assert_eq!(r.per_class["dog"].iou, 1.0);
    assert!(r.per_class["dog"].empty_union);
}

fn grid_pair() -> impl Strategy<Value = (BoolGrid, BoolGrid)> {
    (1usize..10, 1usize..10).prop_flat_map(|(w, h)| {
        (
            proptest::collection::vec(any::<bool>(), w * h),
            proptest::collection::vec(any::<bool>(), w * h),
        )
            .prop_map(move |(a, b)| {
                (
                    BoolGrid { width: w, height: h, data: a },
                    BoolGrid { width: w, height: h, data: b },
                )
            })
    })
}

proptest! {
    #[test]
    fn counts_symmetric_and_bounded((a, b) in grid_pair()) {
        let (tp, fp, fn_, v) = iou(&a, &b).unwrap();
        prop_assert_eq!((tp, fp, fn_), counts_naive(&a, &b));
        let (tp2, fp2, fn2, v2) = iou(&b, &a).unwrap();
        prop_assert_eq!((tp2, fp2, fn2), (tp, fn_, fp));
        prop_assert_eq!(v, v2);
        prop_assert!((0.0..=1.0).contains(&v));
    }
}
