//! Per-class IoU and mIoU of pseudo-masks against ground truth.
//!
//! Counts are summed over all images of a class before dividing. A class
//! whose summed union is empty scores 1 and is flagged in the report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{entry_stem, DatasetManifest};
use crate::error::{OvamError, Result};
use crate::raster::BoolGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `tp / (tp + fp + fn)`; 1 when the denominator is 0.
    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }
}

pub fn confusion(pred: &BoolGrid, gt: &BoolGrid) -> Result<Counts> {
    if pred.dims() != gt.dims() {
        return Err(OvamError::dim(
            "prediction vs ground truth",
            format!("{}x{}", gt.width, gt.height),
            format!("{}x{}", pred.width, pred.height),
        ));
    }
    let mut c = Counts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// `(tp, fp, fn, iou)` for one mask pair.
pub fn iou(pred: &BoolGrid, gt: &BoolGrid) -> Result<(u64, u64, u64, f64)> {
    let c = confusion(pred, gt)?;
    Ok((c.tp, c.fp, c.fn_, c.iou()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    #[serde(flatten)]
    pub counts: Counts,
    pub iou: f64,
    /// Union was empty over every image; `iou` is the convention value 1.
    pub empty_union: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<String, ClassResult>,
    pub miou: f64,
    pub n_images: BTreeMap<String, usize>,
    /// Classes of the list with no evaluated image; excluded from the mean.
    pub absent: Vec<String>,
    /// Kept entries whose ground truth could not be read.
    pub missing_gt: Vec<PathBuf>,
    pub class_order: Vec<String>,
}

impl EvalReport {
    /// Text table: one column per class, then mIoU, values in percent.
    pub fn table(&self) -> String {
        let mut header = String::new();
        let mut row = String::new();
        for c in &self.class_order {
            let w = c.chars().count().max(6);
            let _ = write!(header, "{c:>w$} ");
            match self.per_class.get(c) {
                Some(r) => {
                    let _ = write!(row, "{:>w$.1} ", 100.0 * r.iou);
                }
                None => {
                    let _ = write!(row, "{:>w$} ", "-");
                }
            }
        }
        let _ = write!(header, "{:>6}", "mIoU");
        let _ = write!(row, "{:>6.1}", 100.0 * self.miou);
        format!("{header}\n{row}\n")
    }
}

/// Ground truth for entry `id` is `gt_dir/<stem>.png` (nonzero = class).
pub fn gt_path(gt_dir: &Path, id: u64) -> PathBuf {
    gt_dir.join(format!("{}.png", entry_stem(id)))
}

/// Scores the kept entries of `manifest` (paths relative to `root`).
/// `class_list` fixes the classes averaged; when empty, the classes present
/// in the manifest are used.
pub fn evaluate_dataset(
    manifest: &DatasetManifest,
    root: &Path,
    gt_dir: &Path,
    class_list: &[String],
) -> Result<EvalReport> {
    let mut counts: BTreeMap<String, Counts> = BTreeMap::new();
    let mut n_images: BTreeMap<String, usize> = BTreeMap::new();
    let mut missing_gt = Vec::new();
    for e in manifest.kept() {
        let gp = gt_path(gt_dir, e.id);
        let gt = match BoolGrid::load_png(&gp) {
            Ok(g) => g,
            Err(err) => {
                log::warn!("entry {}: ground truth unavailable: {err}", e.id);
                missing_gt.push(gp);
                continue;
            }
        };
        let pred = BoolGrid::load_png(&root.join(&e.mask_path))?;
        counts
            .entry(e.class.clone())
            .or_default()
            .add(confusion(&pred, &gt)?);
        *n_images.entry(e.class.clone()).or_default() += 1;
    }
    let class_order: Vec<String> = if class_list.is_empty() {
        counts.keys().cloned().collect()
    } else {
        class_list.to_vec()
    };
    Ok(report(counts, n_images, class_order, missing_gt))
}

/// Builds a report from per-class counts.
pub fn report(
    counts: BTreeMap<String, Counts>,
    n_images: BTreeMap<String, usize>,
    class_order: Vec<String>,
    missing_gt: Vec<PathBuf>,
) -> EvalReport {
    let mut per_class = BTreeMap::new();
    let mut absent = Vec::new();
    let mut sum = 0.0;
    for c in &class_order {
        match counts.get(c) {
            Some(k) if n_images.get(c).copied().unwrap_or(0) > 0 => {
                let r = ClassResult {
                    counts: *k,
                    iou: k.iou(),
                    empty_union: k.tp + k.fp + k.fn_ == 0,
                };
                sum += r.iou;
                per_class.insert(c.clone(), r);
            }
            _ => {
                log::warn!("class `{c}` has no evaluated image; excluded from the mean");
                absent.push(c.clone());
            }
        }
    }
    let miou = if per_class.is_empty() {
        0.0
    } else {
        sum / per_class.len() as f64
    };
    EvalReport {
        per_class,
        miou,
        n_images,
        absent,
        missing_gt,
        class_order,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(points: &[(usize, usize)]) -> BoolGrid {
        BoolGrid::from_fn(2, 2, |x, y| points.contains(&(x, y)))
    }

    #[test]
    fn one_third_case() {
        let (tp, fp, fn_, v) = iou(&grid(&[(0, 0), (0, 1)]), &grid(&[(0, 1), (1, 1)])).unwrap();
        assert_eq!((tp, fp, fn_), (1, 1, 1));
        assert_eq!(v, 1.0 / 3.0);
    }

    #[test]
    fn identity_disjoint_empty() {
        let a = grid(&[(0, 0), (1, 0)]);
        assert_eq!(iou(&a, &a).unwrap().3, 1.0);
        assert_eq!(iou(&a, &grid(&[(1, 1)])).unwrap().3, 0.0);
        assert_eq!(iou(&grid(&[]), &grid(&[])).unwrap().3, 1.0);
    }

    #[test]
    fn dims_checked() {
        assert!(iou(&BoolGrid::new(2, 2), &BoolGrid::new(3, 2)).is_err());
    }

    #[test]
    fn absent_classes_excluded() {
        let mut counts = BTreeMap::new();
        counts.insert("dog".to_string(), Counts { tp: 1, fp: 1, fn_: 0 });
        let mut n = BTreeMap::new();
        n.insert("dog".to_string(), 1);
        let r = report(counts, n, vec!["dog".into(), "cat".into()], vec![]);
        assert_eq!(r.miou, 0.5);
        assert_eq!(r.absent, vec!["cat".to_string()]);
        assert!(r.table().contains("mIoU"));
    }
}
