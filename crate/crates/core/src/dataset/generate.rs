use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;

use super::{entry_stem, DatasetManifest, DropReason, ManifestEntry, PromptItem};
use crate::backend::{Denoiser, TokenEmbeddingMatrix};
use crate::error::{OvamError, Result};
use crate::mask::{make_pseudo_mask, write_mask, BinarizationParams, Refiner};

/// How a class is attributed when masking.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassToken {
    /// The class name's own text token (the last one for multi-word names).
    Natural,
    /// An optimized embedding; its last row is the class.
    Optimized(TokenEmbeddingMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub steps: usize,
    /// Worker threads; 0 lets the pool decide.
    pub workers: usize,
    pub natural: BinarizationParams,
    pub optimized: BinarizationParams,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            steps: 3,
            workers: 0,
            natural: BinarizationParams::non_optimized(),
            optimized: BinarizationParams::optimized(),
        }
    }
}

struct Job<'a> {
    backend: &'a dyn Denoiser,
    tokens: &'a BTreeMap<String, ClassToken>,
    refiner: &'a dyn Refiner,
    root: &'a Path,
    opts: &'a GenerateOptions,
}

impl Job<'_> {
    fn run(&self, item: &PromptItem) -> Result<ManifestEntry> {
        let trace = self
            .backend
            .generate_with_trace(&item.prompt, item.seed, self.opts.steps)?;
        let (x, k, params) = match self.tokens.get(&item.class).unwrap_or(&ClassToken::Natural) {
            ClassToken::Natural => {
                let x = self.backend.encode_text(&item.class)?;
                if x.len() < 3 {
                    return Err(OvamError::InvalidArgument(format!(
                        "class name `{}` encodes to no tokens",
                        item.class
                    )));
                }
                let k = x.len() - 2;
                (x, k, &self.opts.natural)
            }
            ClassToken::Optimized(x) => (x.clone(), x.len() - 1, &self.opts.optimized),
        };
        let mut mask = make_pseudo_mask(&trace, &x, k, params, self.refiner)?;
        mask.class_label = item.class.clone();

        let stem = entry_stem(item.id);
        let image_path = format!("images/{stem}.png");
        let mask_path = format!("masks/{stem}.png");
        trace.image.save(self.root.join(&image_path))?;
        write_mask(&self.root.join(&mask_path), &mask, params)?;
        Ok(ManifestEntry {
            id: item.id,
            class: item.class.clone(),
            prompt: item.prompt.clone(),
            seed: item.seed,
            image_path,
            mask_path,
            clip_score: None,
            area_fraction: mask.area_fraction,
            kept: true,
            drop_reason: DropReason::None,
            error: None,
        })
    }

    fn entry(&self, item: &PromptItem) -> ManifestEntry {
        self.run(item).unwrap_or_else(|e| {
            log::warn!("entry {} ({}) failed: {e}", item.id, item.prompt);
            ManifestEntry {
                id: item.id,
                class: item.class.clone(),
                prompt: item.prompt.clone(),
                seed: item.seed,
                image_path: String::new(),
                mask_path: String::new(),
                clip_score: None,
                area_fraction: 0.0,
                kept: false,
                drop_reason: DropReason::Failed,
                error: Some(e.to_string()),
            }
        })
    }
}

/// Generates every prompt not already present in `out_dir/manifest.jsonl`,
/// then rewrites the manifest sorted by id. Entries are appended as they
/// finish, so an interrupted run resumes where it stopped.
pub fn generate_dataset(
    backend: &dyn Denoiser,
    prompts: &[PromptItem],
    tokens: &BTreeMap<String, ClassToken>,
    refiner: &dyn Refiner,
    out_dir: &Path,
    opts: &GenerateOptions,
) -> Result<DatasetManifest> {
    opts.natural.validate()?;
    opts.optimized.validate()?;
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| OvamError::io(&d, e))?;
    }
    let manifest_path = out_dir.join(super::MANIFEST_FILE);
    let previous = if manifest_path.exists() {
        DatasetManifest::read(out_dir)?
    } else {
        DatasetManifest::default()
    };
    let wanted: BTreeSet<u64> = prompts.iter().map(|p| p.id).collect();
    let mut done: BTreeMap<u64, ManifestEntry> = BTreeMap::new();
    for e in previous.entries {
        let files_ok = !e.kept
            || (out_dir.join(&e.image_path).exists() && out_dir.join(&e.mask_path).exists());
        if wanted.contains(&e.id) && files_ok {
            done.insert(e.id, e);
        }
    }
    let pending: Vec<&PromptItem> = prompts.iter().filter(|p| !done.contains_key(&p.id)).collect();
    log::info!("{} entries present, {} to generate", done.len(), pending.len());

    // Rewrite the usable prefix so the appender starts from a clean file.
    let mut head = String::new();
    for e in done.values() {
        head.push_str(&serde_json::to_string(e)?);
        head.push('\n');
    }
    std::fs::write(&manifest_path, head).map_err(|e| OvamError::io(&manifest_path, e))?;
    let file = OpenOptions::new()
        .append(true)
        .open(&manifest_path)
        .map_err(|e| OvamError::io(&manifest_path, e))?;
    let appender = Mutex::new(file);

    let job = Job {
        backend,
        tokens,
        refiner,
        root: out_dir,
        opts,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| OvamError::Config(format!("worker pool: {e}")))?;
    let fresh: Vec<Result<ManifestEntry>> = pool.install(|| {
        pending
            .par_iter()
            .map(|item| {
                let entry = job.entry(item);
                let line = serde_json::to_string(&entry)? + "\n";
                let mut f = appender.lock().expect("manifest appender poisoned");
                f.write_all(line.as_bytes())
                    .and_then(|_| f.flush())
                    .map_err(|e| OvamError::io(&manifest_path, e))?;
                Ok(entry)
            })
            .collect()
    });
    for e in fresh {
        let e = e?;
        done.insert(e.id, e);
    }
    let manifest = DatasetManifest {
        entries: done.into_values().collect(),
        filters: previous.filters,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}
