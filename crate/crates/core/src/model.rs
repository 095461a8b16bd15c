//! The full forecaster: normalization, patching, backbone, fusion head.

use serde::{Deserialize, Serialize};

use crate::backbone::{
    self, apply_freeze, BackboneCache, BackboneConfig, FreezePolicy, FreezeSummary, LayerTaps,
    LnScope,
};
use crate::error::{Error, Result};
use crate::mixers::{self, FuseCache, FusionConfig};
use crate::numerics::ops;
use crate::numerics::rng::{stream, Rng};
use crate::numerics::{ParamSet, Tensor};
use crate::preprocess::{prepare_batch, NormStats, PatchConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScale {
    /// Loss on predictions mapped back to the input scale.
    Denormalized,
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_len: usize,
    /// Set per run from the horizon list; never read from config files.
    #[serde(skip, default = "default_horizon")]
    pub horizon: usize,
    pub patch: PatchConfig,
    pub revin_eps: f64,
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub freeze: FreezePolicy,
    pub ln_scope: LnScope,
}

fn default_horizon() -> usize {
    96
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_len: 96,
            horizon: 96,
            patch: PatchConfig::default(),
            revin_eps: 1e-5,
            backbone: BackboneConfig::default(),
            fusion: FusionConfig::default(),
            freeze: FreezePolicy::LnPe,
            ln_scope: LnScope::All,
        }
    }
}

impl ModelConfig {
    pub fn num_patches(&self) -> Result<usize> {
        self.patch.num_patches(self.input_len)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.fusion.validate(self.backbone.n_layers)?;
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if self.revin_eps <= 0.0 {
            return Err(Error::Config("revin_eps must be positive".into()));
        }
        let np = self.num_patches()?;
        if np > self.backbone.max_patches {
            return Err(Error::Capacity {
                what: "patch count",
                got: np,
                max: self.backbone.max_patches,
            });
        }
        Ok(())
    }
}

/// Forward-pass state needed to backpropagate one batch.
pub struct ForwardCache {
    backbone: BackboneCache,
    fuse: FuseCache,
    taps: LayerTaps,
    pub stats: Vec<NormStats>,
}

#[derive(Debug, Clone)]
pub struct Forecaster {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub freeze: FreezeSummary,
}

impl Forecaster {
    /// Initializes all parameters from `seed` and applies the freeze policy.
    ///
    /// Backbone tensors are drawn first, so every horizon built from the same
    /// seed shares an identical backbone initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, 0);
        let mut params = backbone::init_params(&config.backbone, config.patch.patch_len, &mut rng)?;
        let fusion = mixers::init_params(
            &config.fusion,
            config.backbone.d_model,
            config.num_patches()?,
            config.horizon,
            &mut rng,
        )?;
        params.extend(fusion)?;
        let freeze = apply_freeze(&mut params, config.freeze, config.ln_scope)?;
        Ok(Self {
            config,
            params,
            freeze,
        })
    }

    /// Replaces the parameters, keeping their trainable flags from the policy.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        let mut params = params;
        self.freeze = apply_freeze(&mut params, self.config.freeze, self.config.ln_scope)?;
        self.params = params;
        Ok(())
    }

    pub fn forward<'a, I>(
        &self,
        windows: I,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(mixers::Forecast, ForwardCache)>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        forward(&self.config, &self.params, windows, training, rng)
    }

    /// Eval-mode forecasts on the input scale, one row per window.
    pub fn predict<'a, I>(&self, windows: I) -> Result<Tensor>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut rng = stream(0, 0);
        Ok(self.forward(windows, false, &mut rng)?.0.denormalized)
    }

    /// Eval-mode taps for one window.
    pub fn taps(&self, window: &[f64]) -> Result<LayerTaps> {
        let mut rng = stream(0, 0);
        Ok(self.forward([window], false, &mut rng)?.1.taps)
    }

    /// Mean squared error of one batch; accumulates gradients into trainable
    /// parameters when `with_grad` is set.
    pub fn loss<'a, I>(
        &mut self,
        windows: I,
        targets: &Tensor,
        scale: LossScale,
        training: bool,
        with_grad: bool,
        rng: &mut Rng,
    ) -> Result<f64>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        batch_loss(
            &self.config,
            &mut self.params,
            windows,
            targets,
            scale,
            training,
            with_grad,
            rng,
        )
    }
}

pub fn forward<'a, I>(
    cfg: &ModelConfig,
    params: &ParamSet,
    windows: I,
    training: bool,
    rng: &mut Rng,
) -> Result<(mixers::Forecast, ForwardCache)>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let batch = prepare_batch(windows, cfg.revin_eps, &cfg.patch)?;
    let (taps, x_tilde, bcache) =
        backbone::forward(&cfg.backbone, params, &batch.patches, training, rng)?;
    let (forecast, fcache) = mixers::fuse_and_project(
        &cfg.fusion,
        params,
        &x_tilde,
        &taps,
        &batch.stats,
        cfg.backbone.ln_eps,
        training,
        rng,
    )?;
    Ok((
        forecast,
        ForwardCache {
            backbone: bcache,
            fuse: fcache,
            taps,
            stats: batch.stats,
        },
    ))
}

/// Backpropagates a gradient on the normalized forecast through the model.
pub fn backward(
    cfg: &ModelConfig,
    params: &mut ParamSet,
    cache: &ForwardCache,
    dpred_normalized: &Tensor,
) -> Result<()> {
    let (tap_grads, dx_tilde) = mixers::fuse_backward(params, &cache.fuse, dpred_normalized)?;
    backbone::backward(
        &cfg.backbone,
        params,
        &cache.backbone,
        tap_grads,
        Some(dx_tilde),
    )?;
    // Blocks above the highest selected tap never reach the forecast.
    for (_, p) in params.iter_mut() {
        if p.trainable && !p.tensor.has_grad() {
            let zeros = vec![0.0; p.tensor.len()];
            p.tensor.set_grad(zeros)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn batch_loss<'a, I>(
    cfg: &ModelConfig,
    params: &mut ParamSet,
    windows: I,
    targets: &Tensor,
    scale: LossScale,
    training: bool,
    with_grad: bool,
    rng: &mut Rng,
) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let (forecast, cache) = forward(cfg, params, windows, training, rng)?;
    let (loss, dpred) = match scale {
        LossScale::Denormalized => {
            let (loss, dden) = ops::mse_loss(&forecast.denormalized, targets)?;
            // d(y·s + mu)/dy = s per window
            let horizon = dden.last_dim();
            let mut g = dden.into_data();
            for (row, st) in g.chunks_exact_mut(horizon).zip(&cache.stats) {
                let s = st.scale();
                row.iter_mut().for_each(|v| *v *= s);
            }
            (
                loss,
                Tensor::from_parts(forecast.normalized.shape().to_vec(), g),
            )
        }
        LossScale::Normalized => {
            let horizon = targets.last_dim();
            let mut t = targets.data().to_vec();
            for (row, st) in t.chunks_exact_mut(horizon).zip(&cache.stats) {
                let s = st.scale();
                row.iter_mut().for_each(|v| *v = (*v - st.mu) / s);
            }
            let t = Tensor::from_parts(targets.shape().to_vec(), t);
            ops::mse_loss(&forecast.normalized, &t)?
        }
    };
    if with_grad {
        backward(cfg, params, &cache, &dpred)?;
    }
    Ok(loss)
}
