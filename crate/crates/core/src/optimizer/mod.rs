//! Attribution-token optimization.
//!
//! Learns the rows of `X′` by full-batch gradient descent on the BCE between
//! their attribution maps and annotated masks, with every backend weight
//! frozen. The learning rate follows a step decay and the best embedding seen
//! is kept.

mod objective;
mod token_file;

use serde::{Deserialize, Serialize};

use crate::backend::{Denoiser, TokenEmbeddingMatrix, SOT_LABEL};
use crate::error::{OvamError, Result};
use crate::ovam::{Normalization, SelectionConfig};
use crate::raster::BoolGrid;

pub use objective::{bce_loss, gradient, Objective, TrainingPair, BCE_EPSILON};
pub use token_file::{
    read_token_file, write_token_file, TokenFileMeta, TrainingMeta, TOKEN_DATA_FILE, TOKEN_META_FILE,
};

/// Per-token binary ground truth at image resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    pub channels: Vec<BoolGrid>,
}

impl GroundTruthMask {
    pub fn new(channels: Vec<BoolGrid>) -> Result<Self> {
        let Some(first) = channels.first() else {
            return Err(OvamError::InvalidArgument("ground truth has no channels".into()));
        };
        if channels.iter().any(|c| c.dims() != first.dims()) {
            return Err(OvamError::InvalidArgument(
                "ground-truth channels differ in size".into(),
            ));
        }
        Ok(GroundTruthMask { channels })
    }

    /// Two channels: background (the complement) and the class.
    pub fn from_class_mask(mask: BoolGrid) -> Self {
        GroundTruthMask {
            channels: vec![mask.complement(), mask],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.channels[0].dims()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub selection: SelectionConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 100.0,
            decay_factor: 0.7,
            decay_every: 120,
            epochs: 500,
            selection: SelectionConfig::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(OvamError::Config(format!(
                "learning rate {} must be a finite non-negative number",
                self.learning_rate
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(OvamError::Config(format!(
                "decay factor {} must lie in (0, 1]",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 {
            return Err(OvamError::Config("decay_every must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(OvamError::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate in effect for a 0-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }

    /// The selection with mean-over-slices normalization forced.
    pub fn objective_selection(&self) -> SelectionConfig {
        SelectionConfig {
            normalization: Normalization::MeanOverSlices,
            ..self.selection.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub best_tokens: TokenEmbeddingMatrix,
    pub best_loss: f64,
    /// Loss before each update, one entry per completed epoch.
    pub loss_history: Vec<f64>,
    /// 1-based epoch at which `best_loss` was observed (0 if none).
    pub best_epoch: usize,
}

/// Progress report after each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochEvent {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// `[⟨SoT⟩, classname]`; multi-token class names use the mean of their rows.
pub fn init_attribution_tokens(
    classname: &str,
    encoder: &dyn Denoiser,
) -> Result<TokenEmbeddingMatrix> {
    if classname.trim().is_empty() {
        return Err(OvamError::InvalidArgument("class name is empty".into()));
    }
    let x = encoder.encode_text(classname)?;
    // Rows 1..n-1 are the class name; the last row is the end marker.
    let words = 1..x.len().saturating_sub(1);
    if words.is_empty() {
        return Err(OvamError::InvalidArgument(format!(
            "class name `{classname}` encodes to no tokens"
        )));
    }
    let mut class_row = vec![0.0; x.embed_dim];
    for k in words.clone() {
        for (c, v) in class_row.iter_mut().zip(x.row(k)) {
            *c += v;
        }
    }
    let n = words.len() as f64;
    class_row.iter_mut().for_each(|c| *c /= n);
    let mut data = x.row(0).to_vec();
    data.extend(class_row);
    TokenEmbeddingMatrix::new(
        x.embed_dim,
        data,
        vec![SOT_LABEL.to_string(), classname.to_string()],
    )
}

pub fn optimize_tokens(
    pairs: &[TrainingPair],
    init: &TokenEmbeddingMatrix,
    cfg: &OptimizerConfig,
) -> Result<OptimizationResult> {
    optimize_tokens_with(pairs, init, cfg, |_| {})
}

/// As [`optimize_tokens`], calling `observer` after every epoch.
pub fn optimize_tokens_with(
    pairs: &[TrainingPair],
    init: &TokenEmbeddingMatrix,
    cfg: &OptimizerConfig,
    mut observer: impl FnMut(EpochEvent),
) -> Result<OptimizationResult> {
    cfg.validate()?;
    let objective = Objective::new(pairs, init.len(), &cfg.objective_selection())?;
    let mut tokens = init.clone();
    let mut result = OptimizationResult {
        best_tokens: init.clone(),
        best_loss: f64::INFINITY,
        loss_history: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
    };
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let (loss, grad) = objective.loss_and_gradient(&tokens)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(OvamError::Divergence {
                epoch: epoch + 1,
                last_finite: Box::new(result),
            });
        }
        result.loss_history.push(loss);
        observer(EpochEvent {
            epoch: epoch + 1,
            loss,
            lr,
        });
        if loss < result.best_loss {
            result.best_loss = loss;
            result.best_tokens = tokens.clone();
            result.best_epoch = epoch + 1;
        }
        for (x, g) in tokens.data.iter_mut().zip(&grad) {
            *x -= lr * g;
        }
        if !tokens.is_finite() {
            return Err(OvamError::Divergence {
                epoch: epoch + 1,
                last_finite: Box::new(result),
            });
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ToyDenoiser;

    #[test]
    fn default_schedule() {
        let cfg = OptimizerConfig::default();
        assert_eq!(cfg.learning_rate, 100.0);
        assert_eq!(cfg.decay_factor, 0.7);
        assert_eq!(cfg.decay_every, 120);
        assert_eq!(cfg.epochs, 500);
        assert_eq!(cfg.learning_rate_at(119), 100.0);
        assert!((cfg.learning_rate_at(120) - 70.0).abs() < 1e-12);
        assert!((cfg.learning_rate_at(499) - 100.0 * 0.7f64.powi(4)).abs() < 1e-9);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            OptimizerConfig {
                learning_rate: -1.0,
                ..Default::default()
            },
            OptimizerConfig {
                decay_factor: 0.0,
                ..Default::default()
            },
            OptimizerConfig {
                decay_factor: 1.5,
                ..Default::default()
            },
            OptimizerConfig {
                epochs: 0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn init_rows_are_sot_and_class() {
        let toy = ToyDenoiser::new();
        let x = init_attribution_tokens("dog", &toy).unwrap();
        let enc = toy.encode_text("dog").unwrap();
        assert_eq!(x.len(), 2);
        assert_eq!(x.row(0), enc.row(0));
        assert_eq!(x.row(1), enc.row(1));
        assert_eq!(x, init_attribution_tokens("dog", &toy).unwrap());
    }

    #[test]
    fn multi_token_class_uses_mean() {
        let toy = ToyDenoiser::new();
        let x = init_attribution_tokens("potted plant", &toy).unwrap();
        let enc = toy.encode_text("potted plant").unwrap();
        for i in 0..x.embed_dim {
            let mean = (enc.row(1)[i] + enc.row(2)[i]) / 2.0;
            assert!((x.row(1)[i] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_class_rejected() {
        let toy = ToyDenoiser::new();
        assert!(init_attribution_tokens("  ", &toy).is_err());
    }
}
