//! Synthetic segmentation datasets: prompts, generation, filtering, export.
//!
//! Layout of a dataset directory:
//!
//! * `manifest.jsonl` — one [`ManifestEntry`] per line, sorted by id
//! * `dataset.json` — [`DatasetSummary`]
//! * `images/<id>.png`, `masks/<id>.png` (+ `masks/<id>.json` sidecar)
//! * `lists/all.txt`, `lists/kept.txt` — ids, one per line

mod filter;
mod generate;
mod prompts;

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OvamError, Result};

pub use filter::{
    area_filter, clip_filter, FnScorer, ImageTextScorer, PrecomputedScorer, DEFAULT_AREA_HIGH,
    DEFAULT_AREA_LOW, DEFAULT_KEEP_FRACTION,
};
pub use generate::{generate_dataset, ClassToken, GenerateOptions};
pub use prompts::{
    build_prompts, caption_mentions, read_captions, CaptionRecord, PromptItem, PromptKind,
    PromptPlan, PromptSource, CLASS_SLOT, DEFAULT_TEMPLATE,
};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SUMMARY_FILE: &str = "dataset.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    #[default]
    None,
    ClipBottom,
    AreaLow,
    AreaHigh,
    /// Generation or masking failed; `error` holds the message.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub class: String,
    pub prompt: String,
    pub seed: u64,
    pub image_path: String,
    pub mask_path: String,
    pub clip_score: Option<f64>,
    pub area_fraction: f64,
    pub kept: bool,
    pub drop_reason: DropReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ManifestEntry {
    pub fn drop(&mut self, reason: DropReason) {
        self.kept = false;
        self.drop_reason = reason;
    }
}

/// Record of one filter pass, in application order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "filter", rename_all = "snake_case")]
pub enum FilterRecord {
    Clip {
        keep_fraction: f64,
        prompt_template: String,
        dropped: usize,
    },
    Area {
        low: f64,
        high: f64,
        dropped: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub filters: Vec<FilterRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ClassCounts {
    pub total: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub entries: usize,
    pub kept: usize,
    pub per_class: BTreeMap<String, ClassCounts>,
    pub filters: Vec<FilterRecord>,
}

impl DatasetManifest {
    pub fn kept(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.kept)
    }

    pub fn summary(&self) -> DatasetSummary {
        let mut per_class: BTreeMap<String, ClassCounts> = BTreeMap::new();
        for e in &self.entries {
            let c = per_class.entry(e.class.clone()).or_default();
            c.total += 1;
            c.kept += e.kept as usize;
        }
        DatasetSummary {
            entries: self.entries.len(),
            kept: self.kept().count(),
            per_class,
            filters: self.filters.clone(),
        }
    }

    /// `kept=false ⇔ drop_reason ≠ none`, ids unique.
    pub fn check(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if e.kept == (e.drop_reason != DropReason::None) {
                return Err(OvamError::InvalidArgument(format!(
                    "entry {} has kept={} with drop reason {:?}",
                    e.id, e.kept, e.drop_reason
                )));
            }
            if !seen.insert(e.id) {
                return Err(OvamError::InvalidArgument(format!("duplicate entry id {}", e.id)));
            }
        }
        Ok(())
    }

    /// Writes `manifest.jsonl`, `dataset.json` and `lists/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut entries = self.entries.clone();
        entries.sort_by_key(|e| e.id);
        let mut jsonl = String::new();
        for e in &entries {
            jsonl.push_str(&serde_json::to_string(e)?);
            jsonl.push('\n');
        }
        write_file(&dir.join(MANIFEST_FILE), jsonl.as_bytes())?;
        let summary = DatasetManifest {
            entries,
            filters: self.filters.clone(),
        }
        .summary();
        write_file(&dir.join(SUMMARY_FILE), &serde_json::to_vec_pretty(&summary)?)?;
        let lists = dir.join("lists");
        std::fs::create_dir_all(&lists).map_err(|e| OvamError::io(&lists, e))?;
        let ids = |kept_only: bool| {
            let mut ids: Vec<u64> = self
                .entries
                .iter()
                .filter(|e| !kept_only || e.kept)
                .map(|e| e.id)
                .collect();
            ids.sort_unstable();
            ids.iter().map(|i| format!("{}\n", entry_stem(*i))).collect::<String>()
        };
        write_file(&lists.join("all.txt"), ids(false).as_bytes())?;
        write_file(&lists.join("kept.txt"), ids(true).as_bytes())?;
        Ok(())
    }

    /// Reads `manifest.jsonl` and the filter history from `dataset.json`
    /// when present.
    pub fn read(dir: &Path) -> Result<Self> {
        let entries = read_entries(&dir.join(MANIFEST_FILE))?;
        let summary_path = dir.join(SUMMARY_FILE);
        let filters = if summary_path.exists() {
            let raw = std::fs::read(&summary_path).map_err(|e| OvamError::io(&summary_path, e))?;
            serde_json::from_slice::<DatasetSummary>(&raw)?.filters
        } else {
            Vec::new()
        };
        Ok(DatasetManifest { entries, filters })
    }
}

pub(crate) fn read_entries(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| OvamError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| OvamError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(e) => out.push(e),
            // A torn final line from an interrupted run is ignored.
            Err(e) if e.is_eof() => log::warn!("{}: ignoring truncated line {}", path.display(), n + 1),
            Err(e) => {
                return Err(OvamError::Format {
                    path: path.to_path_buf(),
                    message: format!("line {}: {e}", n + 1),
                })
            }
        }
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| OvamError::io(path, e))
}

/// File stem used for entry `id` under `images/`, `masks/` and `lists/`.
pub fn entry_stem(id: u64) -> String {
    format!("{id:06}")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn entry(id: u64, class: &str, area: f64) -> ManifestEntry {
        ManifestEntry {
            id,
            class: class.into(),
            prompt: format!("A photograph of a {class}"),
            seed: id,
            image_path: format!("images/{}.png", entry_stem(id)),
            mask_path: format!("masks/{}.png", entry_stem(id)),
            clip_score: None,
            area_fraction: area,
            kept: true,
            drop_reason: DropReason::None,
            error: None,
        }
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest {
            entries: vec![entry(1, "cat", 0.3), entry(0, "dog", 0.5)],
            filters: vec![FilterRecord::Area {
                low: 0.05,
                high: 0.95,
                dropped: 1,
            }],
        };
        m.entries[0].drop(DropReason::AreaLow);
        m.write(dir.path()).unwrap();
        let back = DatasetManifest::read(dir.path()).unwrap();
        assert_eq!(back.entries[0].id, 0);
        assert_eq!(back.entries.len(), 2);
        assert_eq!(back.filters, m.filters);
        let kept = std::fs::read_to_string(dir.path().join("lists/kept.txt")).unwrap();
        assert_eq!(kept, "000000\n");
        let s = back.summary();
        assert_eq!(s.per_class["cat"], ClassCounts { total: 1, kept: 0 });
    }

    #[test]
    fn check_flags_inconsistent_entries() {
        let mut m = DatasetManifest {
            entries: vec![entry(0, "dog", 0.5)],
            filters: vec![],
        };
        assert!(m.check().is_ok());
        m.entries[0].kept = false;
        assert!(m.check().is_err());
    }

    #[test]
    fn truncated_last_line_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let line = serde_json::to_string(&entry(0, "dog", 0.5)).unwrap();
        let torn = format!("{line}\n{}", &line[..line.len() / 2]);
        std::fs::write(dir.path().join(MANIFEST_FILE), torn).unwrap();
        assert_eq!(read_entries(&dir.path().join(MANIFEST_FILE)).unwrap().len(), 1);
    }
}
