use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::{DatasetManifest, DropReason, FilterRecord, ManifestEntry};
use crate::error::{OvamError, Result};

pub const DEFAULT_KEEP_FRACTION: f64 = 0.7;
pub const DEFAULT_AREA_LOW: f64 = 0.05;
pub const DEFAULT_AREA_HIGH: f64 = 0.95;

/// Image-text similarity, e.g. CLIP cosine similarity.
pub trait ImageTextScorer: Send + Sync {
    /// `root` is the dataset directory the entry's paths are relative to.
    fn score(&self, entry: &ManifestEntry, text: &str, root: &Path) -> Result<f64>;
}

/// Scores computed elsewhere, keyed by entry id.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedScorer {
    pub scores: HashMap<u64, f64>,
}

impl PrecomputedScorer {
    /// Newline-delimited JSON records `{"id": <int>, "score": <real>}`.
    pub fn from_jsonl(path: &Path) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct Row {
            id: u64,
            score: f64,
        }
        let text = std::fs::read_to_string(path).map_err(|e| OvamError::io(path, e))?;
        let mut scores = HashMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row: Row = serde_json::from_str(line).map_err(|e| OvamError::Format {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", n + 1),
            })?;
            scores.insert(row.id, row.score);
        }
        Ok(PrecomputedScorer { scores })
    }
}

impl ImageTextScorer for PrecomputedScorer {
    fn score(&self, entry: &ManifestEntry, _text: &str, _root: &Path) -> Result<f64> {
        self.scores.get(&entry.id).copied().ok_or_else(|| {
            OvamError::InvalidArgument(format!("no similarity score for entry {}", entry.id))
        })
    }
}

/// Wraps a closure; handy as a test stub.
pub struct FnScorer<F>(pub F);

impl<F> ImageTextScorer for FnScorer<F>
where
    F: Fn(&ManifestEntry, &str) -> f64 + Send + Sync,
{
    fn score(&self, entry: &ManifestEntry, text: &str, _root: &Path) -> Result<f64> {
        Ok((self.0)(entry, text))
    }
}

/// Per class, drops the `⌊(1 − keep_fraction)·n_c⌋` lowest-scoring kept
/// entries (ties by id ascending). Every kept entry receives its score.
pub fn clip_filter(
    manifest: &DatasetManifest,
    scorer: Option<&dyn ImageTextScorer>,
    keep_fraction: f64,
    prompt_template: &str,
    root: &Path,
) -> Result<DatasetManifest> {
    let scorer = scorer.ok_or(OvamError::ScorerUnavailable)?;
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(OvamError::InvalidArgument(format!(
            "keep fraction {keep_fraction} must lie in [0, 1]"
        )));
    }
    let mut out = manifest.clone();
    let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, e) in out.entries.iter().enumerate().filter(|(_, e)| e.kept) {
        by_class.entry(e.class.clone()).or_default().push(i);
    }
    let mut dropped = 0;
    for (class, idx) in by_class {
        let text = prompt_template.replace(super::CLASS_SLOT, &class);
        let mut scored = Vec::with_capacity(idx.len());
        for i in idx {
            let s = scorer.score(&out.entries[i], &text, root)?;
            if !s.is_finite() {
                return Err(OvamError::NonFinite("similarity score"));
            }
            out.entries[i].clip_score = Some(s);
            scored.push((s, out.entries[i].id, i));
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        // The small slack absorbs products like 0.3 · 10 = 3.0000000000000004
        // landing just under an integer the other way.
        let n_drop = ((1.0 - keep_fraction) * scored.len() as f64 + 1e-9).floor() as usize;
        for &(_, _, i) in scored.iter().take(n_drop) {
            out.entries[i].drop(DropReason::ClipBottom);
        }
        dropped += n_drop;
    }
    out.filters.push(FilterRecord::Clip {
        keep_fraction,
        prompt_template: prompt_template.to_string(),
        dropped,
    });
    Ok(out)
}

/// Drops kept entries whose mask area lies outside the closed `[low, high]`.
pub fn area_filter(manifest: &DatasetManifest, low: f64, high: f64) -> Result<DatasetManifest> {
    if !(0.0 <= low && low <= high && high <= 1.0) {
        return Err(OvamError::InvalidArgument(format!(
            "area bounds [{low}, {high}] must satisfy 0 ≤ low ≤ high ≤ 1"
        )));
    }
    let mut out = manifest.clone();
    let mut dropped = 0;
    for e in out.entries.iter_mut().filter(|e| e.kept) {
        if e.area_fraction < low {
            e.drop(DropReason::AreaLow);
            dropped += 1;
        } else if e.area_fraction > high {
            e.drop(DropReason::AreaHigh);
            dropped += 1;
        }
    }
    out.filters.push(FilterRecord::Area { low, high, dropped });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::tests::entry;
    use super::*;

    fn one_class(n: u64) -> DatasetManifest {
        DatasetManifest {
            entries: (0..n).map(|i| entry(i, "dog", 0.5)).collect(),
            filters: vec![],
        }
    }

    fn id_scorer() -> FnScorer<impl Fn(&ManifestEntry, &str) -> f64 + Send + Sync> {
        FnScorer(|e: &ManifestEntry, _: &str| e.id as f64)
    }

    #[test]
    fn bottom_thirty_percent_dropped() {
        let m = clip_filter(&one_class(10), Some(&id_scorer()), 0.7, "x", Path::new(".")).unwrap();
        let dropped: Vec<u64> = m.entries.iter().filter(|e| !e.kept).map(|e| e.id).collect();
        assert_eq!(dropped, vec![0, 1, 2]);
        assert!(m.entries.iter().all(|e| e.clip_score.is_some()));
    }

    #[test]
    fn keep_all() {
        let m = clip_filter(&one_class(10), Some(&id_scorer()), 1.0, "x", Path::new(".")).unwrap();
        assert!(m.entries.iter().all(|e| e.kept));
    }

    #[test]
    fn missing_scorer_refuses() {
        assert!(matches!(
            clip_filter(&one_class(3), None, 0.7, "x", Path::new(".")),
            Err(OvamError::ScorerUnavailable)
        ));
    }

    #[test]
    fn ties_broken_by_id() {
        let flat = FnScorer(|_: &ManifestEntry, _: &str| 0.5);
        let m = clip_filter(&one_class(4), Some(&flat), 0.5, "x", Path::new(".")).unwrap();
        let dropped: Vec<u64> = m.entries.iter().filter(|e| !e.kept).map(|e| e.id).collect();
        assert_eq!(dropped, vec![0, 1]);
    }

    #[test]
    fn area_bounds_are_closed() {
        let m = DatasetManifest {
            entries: vec![
                entry(0, "dog", 0.04),
                entry(1, "dog", 0.05),
                entry(2, "dog", 0.95),
                entry(3, "dog", 0.96),
            ],
            filters: vec![],
        };
        let f = area_filter(&m, 0.05, 0.95).unwrap();
        let reasons: Vec<DropReason> = f.entries.iter().map(|e| e.drop_reason).collect();
        assert_eq!(
            reasons,
            vec![DropReason::AreaLow, DropReason::None, DropReason::None, DropReason::AreaHigh]
        );
    }
}
