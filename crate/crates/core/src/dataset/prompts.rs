use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{OvamError, Result};

/// Placeholder replaced by the class name in template prompts.
pub const CLASS_SLOT: &str = "{classname}";
pub const DEFAULT_TEMPLATE: &str = "A photograph of a {classname}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    #[default]
    Template,
    Captions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSource {
    pub kind: PromptKind,
    pub template: String,
    /// Newline-delimited JSON records `{caption, id}`.
    pub caption_file: Option<PathBuf>,
    /// Extra phrases accepted for a class when matching captions.
    pub synonyms: BTreeMap<String, Vec<String>>,
    pub classes: Vec<String>,
    /// Prompts per class; in caption mode 0 keeps every match.
    pub per_class_count: usize,
    pub seed_base: u64,
}

impl Default for PromptSource {
    fn default() -> Self {
        PromptSource {
            kind: PromptKind::Template,
            template: DEFAULT_TEMPLATE.into(),
            caption_file: None,
            synonyms: BTreeMap::new(),
            classes: Vec::new(),
            per_class_count: 1,
            seed_base: 0,
        }
    }
}

impl PromptSource {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(OvamError::Config("prompt source lists no classes".into()));
        }
        if self.classes.iter().any(|c| c.trim().is_empty()) {
            return Err(OvamError::Config("empty class name".into()));
        }
        match self.kind {
            PromptKind::Template => {
                if self.template.matches(CLASS_SLOT).count() != 1 {
                    return Err(OvamError::Config(format!(
                        "template `{}` must contain {CLASS_SLOT} exactly once",
                        self.template
                    )));
                }
            }
            PromptKind::Captions => {
                if self.caption_file.is_none() {
                    return Err(OvamError::Config("caption mode needs caption_file".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptItem {
    pub id: u64,
    pub class: String,
    pub prompt: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption: String,
    pub id: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PromptPlan {
    pub items: Vec<PromptItem>,
    /// Classes for which no caption matched.
    pub unmatched: Vec<String>,
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// True when `phrase` occurs in `caption` as a run of whole words,
/// ignoring case and punctuation.
pub fn caption_mentions(caption: &str, phrase: &str) -> bool {
    let hay = words(caption);
    let needle = words(phrase);
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

pub fn read_captions(path: &std::path::Path) -> Result<Vec<CaptionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| OvamError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| OvamError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord = serde_json::from_str(&line).map_err(|e| OvamError::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn build_prompts(src: &PromptSource) -> Result<PromptPlan> {
    src.validate()?;
    let mut plan = PromptPlan::default();
    let push = |plan: &mut PromptPlan, class: &str, prompt: String| {
        let id = plan.items.len() as u64;
        plan.items.push(PromptItem {
            id,
            class: class.to_string(),
            prompt,
            seed: src.seed_base + id,
        });
    };
    match src.kind {
        PromptKind::Template => {
            for class in &src.classes {
                for _ in 0..src.per_class_count {
                    push(&mut plan, class, src.template.replace(CLASS_SLOT, class));
                }
            }
        }
        PromptKind::Captions => {
            let path = src.caption_file.as_ref().expect("validated");
            let captions = read_captions(path)?;
            for class in &src.classes {
                let mut phrases = vec![class.clone()];
                if let Some(extra) = src.synonyms.get(class) {
                    phrases.extend(extra.iter().cloned());
                }
                let mut matched = 0;
                for rec in &captions {
                    if src.per_class_count > 0 && matched == src.per_class_count {
                        break;
                    }
                    if phrases.iter().any(|p| caption_mentions(&rec.caption, p)) {
                        push(&mut plan, class, rec.caption.clone());
                        matched += 1;
                    }
                }
                if matched == 0 {
                    log::warn!("no caption mentions class `{class}`");
                    plan.unmatched.push(class.clone());
                }
            }
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_counts_and_seeds() {
        let src = PromptSource {
            classes: vec!["dog".into(), "cat".into()],
            per_class_count: 2,
            ..Default::default()
        };
        let plan = build_prompts(&src).unwrap();
        assert_eq!(plan.items.len(), 4);
        let seeds: Vec<u64> = plan.items.iter().map(|p| p.seed).collect();
        assert_eq!(seeds, vec![0, 1, 2, 3]);
        assert_eq!(plan.items[2].prompt, "A photograph of a cat");
    }

    #[test]
    fn template_slot_validated() {
        let src = PromptSource {
            template: "no slot here".into(),
            classes: vec!["dog".into()],
            ..Default::default()
        };
        assert!(build_prompts(&src).is_err());
    }

    #[test]
    fn whole_word_matching() {
        assert!(caption_mentions("A Dog, running.", "dog"));
        assert!(!caption_mentions("hotdog stand", "dog"));
        assert!(caption_mentions("a potted plant by the door", "potted plant"));
        assert!(!caption_mentions("a plant, potted", "potted plant"));
    }
}
