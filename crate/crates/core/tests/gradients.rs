use logo_core::backbone::{BackboneConfig, FreezePolicy};
use logo_core::mixers::{FusionConfig, FusionVariant, LayerSelection};
use logo_core::model::{batch_loss, Forecaster, LossScale, ModelConfig};
use logo_core::numerics::rng::stream;
use logo_core::numerics::{grad_check, Tensor};
use logo_core::preprocess::PatchConfig;
use rand::Rng as _;

fn config(variant: FusionVariant, selection: LayerSelection, freeze: FreezePolicy) -> ModelConfig {
    ModelConfig {
        input_len: 24,
        horizon: 4,
        patch: PatchConfig {
            patch_len: 8,
            stride: 4,
            pad: 4,
        },
        backbone: BackboneConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_patches: 8,
            dropout: 0.0,
            ..BackboneConfig::default()
        },
        fusion: FusionConfig {
            variant,
            selection,
            dropout: 0.0,
            ..FusionConfig::default()
        },
        freeze,
        ..ModelConfig::default()
    }
}

fn batch(cfg: &ModelConfig, n: usize, seed: u64) -> (Vec<Vec<f64>>, Tensor) {
    let mut r = stream(seed, 9);
    let w: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..cfg.input_len)
                .map(|_| r.random_range(-1.0..2.0))
                .collect()
        })
        .collect();
    let t = Tensor::from_fn(&[n, cfg.horizon], |_| r.random_range(-1.0..2.0));
    (w, t)
}

fn check(cfg: ModelConfig, scale: LossScale) -> f64 {
    let mut model = Forecaster::new(cfg.clone(), 11).unwrap();
    let (windows, targets) = batch(&cfg, 3, 4);
    let report = grad_check(&mut model.params, 1e-5, |p, with_grad| {
        let mut rng = stream(0, 1);
        batch_loss(
            &cfg,
            p,
            windows.iter().map(Vec::as_slice),
            &targets,
            scale,
            false,
            with_grad,
            &mut rng,
        )
    })
    .unwrap();
    assert!(report.checked > 0);
    report.max_rel_err
}

#[test]
fn every_variant_and_selection_matches_finite_differences() {
    for variant in FusionVariant::ALL {
        for selection in LayerSelection::ALL {
            let err = check(
                config(variant, selection, FreezePolicy::Full),
                LossScale::Denormalized,
            );
            assert!(err <= 1e-4, "{variant:?}/{selection:?}: {err}");
        }
    }
}

#[test]
fn normalized_loss_matches_finite_differences() {
    let err = check(
        config(
            FusionVariant::Mixer,
            LayerSelection::Boundary,
            FreezePolicy::Full,
        ),
        LossScale::Normalized,
    );
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn local_tap_zero_matches_finite_differences() {
    let mut cfg = config(
        FusionVariant::Mixer,
        LayerSelection::Boundary,
        FreezePolicy::Full,
    );
    cfg.fusion.local_tap = 0;
    assert!(check(cfg, LossScale::Denormalized) <= 1e-4);
}

#[test]
fn frozen_backbone_entries_are_skipped() {
    let cfg = config(
        FusionVariant::Mixer,
        LayerSelection::Boundary,
        FreezePolicy::LnPe,
    );
    let mut model = Forecaster::new(cfg.clone(), 11).unwrap();
    let (windows, targets) = batch(&cfg, 2, 4);
    let report = grad_check(&mut model.params, 1e-5, |p, with_grad| {
        let mut rng = stream(0, 1);
        batch_loss(
            &cfg,
            p,
            windows.iter().map(Vec::as_slice),
            &targets,
            LossScale::Denormalized,
            false,
            with_grad,
            &mut rng,
        )
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{}", report.max_rel_err);
    assert!(report
        .skipped
        .iter()
        .any(|n| n == "block.1.attn.qkv.weight"));
    assert!(report
        .skipped
        .iter()
        .all(|n| !n.contains("ln") && n != "embed.pos"));
}
