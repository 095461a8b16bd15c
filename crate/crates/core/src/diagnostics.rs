//! Gradient checking and hidden-state probes on whole models.

use rand::Rng as _;

use crate::backbone::{BackboneConfig, FreezePolicy};
use crate::error::Result;
use crate::mixers::{similarity_matrices, FusionConfig, SimilarityMatrix};
use crate::model::{batch_loss, Forecaster, LossScale, ModelConfig};
use crate::numerics::rng::stream;
use crate::numerics::{grad_check, GradCheckReport, Tensor};
use crate::preprocess::PatchConfig;

/// Pass threshold for [`model_grad_check`].
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
pub const GRAD_CHECK_STEP: f64 = 1e-4;

/// Two blocks, width 16, six patches, every parameter trainable and no
/// dropout, so the loss is a deterministic function of the parameters.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        input_len: 48,
        horizon: 8,
        patch: PatchConfig::default(),
        backbone: BackboneConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_patches: 8,
            dropout: 0.0,
            ..BackboneConfig::default()
        },
        fusion: FusionConfig {
            dropout: 0.0,
            ..FusionConfig::default()
        },
        freeze: FreezePolicy::Full,
        ..ModelConfig::default()
    }
}

/// Finite-difference check of the full training loss on random windows.
pub fn model_grad_check(
    cfg: &ModelConfig,
    seed: u64,
    batch: usize,
    h: f64,
) -> Result<GradCheckReport> {
    let mut model = Forecaster::new(cfg.clone(), seed)?;
    let mut r = stream(seed, 20);
    let windows: Vec<Vec<f64>> = (0..batch)
        .map(|_| {
            (0..cfg.input_len)
                .map(|_| r.random_range(-1.0..2.0))
                .collect()
        })
        .collect();
    let targets = Tensor::from_fn(&[batch, cfg.horizon], |_| r.random_range(-1.0..2.0));
    grad_check(&mut model.params, h, |p, with_grad| {
        let mut rng = stream(seed, 1);
        batch_loss(
            cfg,
            p,
            windows.iter().map(Vec::as_slice),
            &targets,
            LossScale::Denormalized,
            false,
            with_grad,
            &mut rng,
        )
    })
}

/// Cosine-similarity matrices of every tap for one input window.
pub fn probe(model: &Forecaster, window: &[f64]) -> Result<Vec<SimilarityMatrix>> {
    similarity_matrices(&model.taps(window)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_check_has_six_patches_and_passes() {
        let cfg = grad_check_config();
        assert_eq!(cfg.num_patches().unwrap(), 6);
        let report = model_grad_check(&cfg, 0, 2, GRAD_CHECK_STEP).unwrap();
        assert!(report.skipped.is_empty());
        assert!(report.max_rel_err <= GRAD_CHECK_TOLERANCE, "{report:?}");
    }

    #[test]
    fn probe_returns_one_matrix_per_tap() {
        let cfg = ModelConfig {
            horizon: 8,
            ..grad_check_config()
        };
        let model = Forecaster::new(cfg, 1).unwrap();
        let w: Vec<f64> = (0..48).map(|i| (i as f64 * 0.3).sin()).collect();
        let ms = probe(&model, &w).unwrap();
        assert_eq!(ms.len(), 3);
        assert!(ms.iter().all(|m| m.values.shape() == [6, 6]));
    }
}
