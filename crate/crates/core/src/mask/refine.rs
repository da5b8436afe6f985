use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::crf::{dense_crf, CrfParams};
use crate::error::{OvamError, Result};
use crate::raster::BoolGrid;

/// Mask refinement behind a fixed contract: same dims in, same dims out.
pub trait Refiner: Send + Sync {
    fn name(&self) -> &str;
    fn refine(&self, image: &RgbImage, mask: &BoolGrid) -> Result<BoolGrid>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRefiner;

impl Refiner for IdentityRefiner {
    fn name(&self) -> &str {
        "identity"
    }

    fn refine(&self, _image: &RgbImage, mask: &BoolGrid) -> Result<BoolGrid> {
        Ok(mask.clone())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DenseCrfRefiner {
    pub params: CrfParams,
}

impl Refiner for DenseCrfRefiner {
    fn name(&self) -> &str {
        "dense_crf"
    }

    fn refine(&self, image: &RgbImage, mask: &BoolGrid) -> Result<BoolGrid> {
        dense_crf(image, mask, &self.params)
    }
}

/// Runs `program [args..] <image.png> <mask.png> <out.png>` and reads the
/// output mask back. A missing program degrades to identity with a warning.
#[derive(Debug, Clone)]
pub struct ExternalRefiner {
    pub program: PathBuf,
    pub args: Vec<String>,
}

static SCRATCH: AtomicU64 = AtomicU64::new(0);

impl Refiner for ExternalRefiner {
    fn name(&self) -> &str {
        "external"
    }

    fn refine(&self, image: &RgbImage, mask: &BoolGrid) -> Result<BoolGrid> {
        let dir = std::env::temp_dir().join(format!(
            "ovam-refine-{}-{}",
            std::process::id(),
            SCRATCH.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::create_dir_all(&dir).map_err(|e| OvamError::io(&dir, e))?;
        let result = self.run(&dir, image, mask);
        let _ = std::fs::remove_dir_all(&dir);
        result
    }
}

impl ExternalRefiner {
    fn run(&self, dir: &std::path::Path, image: &RgbImage, mask: &BoolGrid) -> Result<BoolGrid> {
        let (img_path, mask_path, out_path) =
            (dir.join("image.png"), dir.join("mask.png"), dir.join("out.png"));
        image.save(&img_path)?;
        mask.save_png(&mask_path)?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&img_path)
            .arg(&mask_path)
            .arg(&out_path)
            .status();
        match status {
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                log::warn!(
                    "refiner `{}` not found; leaving the mask unrefined",
                    self.program.display()
                );
                Ok(mask.clone())
            }
            Err(e) => Err(OvamError::io(&self.program, e)),
            Ok(s) if !s.success() => Err(OvamError::InvalidArgument(format!(
                "refiner `{}` exited with {s}",
                self.program.display()
            ))),
            Ok(_) => {
                let out = BoolGrid::load_png(&out_path)?;
                if out.dims() != mask.dims() {
                    return Err(OvamError::dim(
                        "refined mask",
                        format!("{}x{}", mask.width, mask.height),
                        format!("{}x{}", out.width, out.height),
                    ));
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RefinerConfig {
    Identity,
    #[default]
    DenseCrf,
    External {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
}

pub fn refiner_for(config: &RefinerConfig, crf: CrfParams) -> Box<dyn Refiner> {
    match config {
        RefinerConfig::Identity => Box::new(IdentityRefiner),
        RefinerConfig::DenseCrf => Box::new(DenseCrfRefiner { params: crf }),
        RefinerConfig::External { program, args } => Box::new(ExternalRefiner {
            program: program.clone(),
            args: args.clone(),
        }),
    }
}
