//! TOML configuration shared by the commands and the service.
//!
//! Every key is optional; missing keys take the defaults below.
//!
//! ```toml
//! backend = "toy"            # overridden by OVAM_BACKEND
//! steps = 3                  # denoising steps for new generations
//!
//! [mask.natural]             # plain-text tokens
//! tau = 0.4
//! alpha = 0.85
//! use_self_attention = true
//! use_crf = true
//! threshold_at_latent = false
//!
//! [mask.optimized]           # tokens read from a token file
//! tau = 0.8
//! alpha = 0.95
//!
//! [crf]
//! w_bilateral = 10.0
//! theta_alpha = 80.0
//! theta_beta = 13.0
//! w_spatial = 3.0
//! theta_gamma = 3.0
//! iterations = 5
//! unary_confidence = 0.9
//!
//! [refiner]
//! kind = "dense_crf"         # or "identity", or "external" with program/args
//!
//! [selection]                # heatmap defaults
//! blocks = ["cross_r1"]      # omit for all cross blocks
//! heads = [0, 1]             # omit for all heads
//! timesteps = { mode = "all" }   # or { mode = "single" | "early" | "late", step = 1 }
//! output_size = [64, 64]     # omit for the latent size
//! normalization = "raw_sum"  # or "mean_over_slices"
//!
//! [optimizer]
//! learning_rate = 100.0
//! decay_factor = 0.7
//! decay_every = 120
//! epochs = 500
//!
//! [dataset]
//! classes = ["dog", "cat"]
//! template = "A photograph of a {classname}"
//! per_class_count = 30
//! seed_base = 0
//! workers = 0
//! keep_fraction = 0.7
//! clip_template = "A photograph of a {classname}"
//! area_low = 0.05
//! area_high = 0.95
//!
//! [dataset.synonyms]
//! dog = ["puppy"]
//!
//! [service]
//! bind = "127.0.0.1:8700"
//! data_dir = "ovam-data"
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ovam_core::backend::{load_backend, Denoiser, TOY_BACKEND_ID};
use ovam_core::dataset::{
    PromptSource, DEFAULT_AREA_HIGH, DEFAULT_AREA_LOW, DEFAULT_KEEP_FRACTION, DEFAULT_TEMPLATE,
};
use ovam_core::mask::{refiner_for, BinarizationParams, CrfParams, Refiner, RefinerConfig};
use ovam_core::optimizer::OptimizerConfig;
use ovam_core::ovam::SelectionConfig;
use ovam_core::{OvamError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backend: String,
    pub steps: usize,
    pub mask: MaskDefaults,
    pub crf: CrfParams,
    pub refiner: RefinerConfig,
    pub selection: SelectionConfig,
    pub optimizer: OptimizerConfig,
    pub dataset: DatasetDefaults,
    pub service: ServiceConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            backend: TOY_BACKEND_ID.into(),
            steps: 3,
            mask: MaskDefaults::default(),
            crf: CrfParams::default(),
            refiner: RefinerConfig::default(),
            selection: SelectionConfig::default(),
            optimizer: OptimizerConfig::default(),
            dataset: DatasetDefaults::default(),
            service: ServiceConfig::default(),
        }
    }
}

/// Binarization defaults per token kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskDefaults {
    pub natural: BinarizationParams,
    pub optimized: BinarizationParams,
}

impl Default for MaskDefaults {
    fn default() -> Self {
        MaskDefaults {
            natural: BinarizationParams::non_optimized(),
            optimized: BinarizationParams::optimized(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetDefaults {
    pub classes: Vec<String>,
    pub template: String,
    pub per_class_count: usize,
    pub seed_base: u64,
    pub synonyms: std::collections::BTreeMap<String, Vec<String>>,
    pub workers: usize,
    pub keep_fraction: f64,
    pub clip_template: String,
    pub area_low: f64,
    pub area_high: f64,
}

impl Default for DatasetDefaults {
    fn default() -> Self {
        DatasetDefaults {
            classes: Vec::new(),
            template: DEFAULT_TEMPLATE.into(),
            per_class_count: 1,
            seed_base: 0,
            synonyms: Default::default(),
            workers: 0,
            keep_fraction: DEFAULT_KEEP_FRACTION,
            clip_template: DEFAULT_TEMPLATE.into(),
            area_low: DEFAULT_AREA_LOW,
            area_high: DEFAULT_AREA_HIGH,
        }
    }
}

impl DatasetDefaults {
    pub fn prompt_source(&self) -> PromptSource {
        PromptSource {
            template: self.template.clone(),
            synonyms: self.synonyms.clone(),
            classes: self.classes.clone(),
            per_class_count: self.per_class_count,
            seed_base: self.seed_base,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub data_dir: PathBuf,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8700".into(),
            data_dir: "ovam-data".into(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| OvamError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| OvamError::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                Self::parse(&text)
            }
            None => Ok(Config::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mask.natural.validate()?;
        self.mask.optimized.validate()?;
        self.crf.validate()?;
        self.optimizer.validate()?;
        if self.steps == 0 {
            return Err(OvamError::Config("steps must be at least 1".into()));
        }
        Ok(())
    }

    /// The configured backend, unless `OVAM_BACKEND` names another.
    pub fn backend(&self) -> Result<Arc<dyn Denoiser>> {
        load_backend(&self.backend)
    }

    pub fn refiner(&self) -> Box<dyn Refiner> {
        refiner_for(&self.refiner, self.crf)
    }
}
