//! Mini-batch training with early stopping, evaluation metrics and the
//! experiment protocols built on them.

mod ablation;
mod protocol;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{SeriesDataset, WindowIndex};
use crate::error::{Error, Result};
use crate::model::{self, Forecaster, LossScale};
use crate::numerics::rng::{stream, RunRngs};
use crate::numerics::{adam_step, AdamConfig, AdamState, ParamSet, Tensor};

pub use ablation::{
    ablation_csv, ablation_report, ablation_sweep, apply_axis, AblationAxis, AblationRow,
};
pub use protocol::{
    evaluate_only, fingerprint_hex, metrics_csv, report_text, run_horizon, run_protocol,
    timing_csv, Protocol, RunOutput, RunReport, METRICS_HEADER,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Optimizer step budget across all epochs; 0 means unlimited.
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub horizons: Vec<usize>,
    pub loss_scale: LossScale,
    /// Scale the reported metrics are computed on.
    pub metric_scale: LossScale,
    pub eval_batch: usize,
    pub channel_independent: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 10,
            max_steps: 0,
            batch_size: 32,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 3,
            seed: 0,
            horizons: vec![96, 192, 336, 720],
            loss_scale: LossScale::Denormalized,
            metric_scale: LossScale::Denormalized,
            eval_batch: 256,
            channel_independent: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::Config(
                "horizons must be a nonempty list of positive lengths".into(),
            ));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config(
                "lr must be positive and betas in [0, 1)".into(),
            ));
        }
        if !self.channel_independent {
            return Err(Error::Config(
                "the forecaster is univariate; channel_independent must be true".into(),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Error statistics over every window, channel and horizon step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

impl Metrics {
    /// Arithmetic mean of per-horizon metrics.
    pub fn average(items: &[Metrics]) -> Option<Metrics> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        Some(Metrics {
            mse: items.iter().map(|m| m.mse).sum::<f64>() / n,
            mae: items.iter().map(|m| m.mae).sum::<f64>() / n,
        })
    }
}

#[derive(Default)]
struct ErrorSums {
    sq: f64,
    abs: f64,
    count: usize,
}

impl ErrorSums {
    fn add(&mut self, pred: &[f64], target: &[f64]) {
        for (p, t) in pred.iter().zip(target) {
            let e = p - t;
            self.sq += e * e;
            self.abs += e.abs();
        }
        self.count += pred.len();
    }

    fn finish(self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::Data("no windows to evaluate".into()));
        }
        let n = self.count as f64;
        Ok(Metrics {
            mse: self.sq / n,
            mae: self.abs / n,
        })
    }
}

/// Eval-mode metrics of `model` over `windows`.
pub fn evaluate(
    model: &Forecaster,
    ds: &SeriesDataset,
    windows: &[WindowIndex],
    batch: usize,
    scale: LossScale,
) -> Result<Metrics> {
    let mut sums = ErrorSums::default();
    let mut rng = stream(0, 0);
    for chunk in windows.chunks(batch.max(1)) {
        let (forecast, cache) = model::forward(
            &model.config,
            &model.params,
            chunk.iter().map(|w| ds.input(w)),
            false,
            &mut rng,
        )?;
        match scale {
            LossScale::Denormalized => {
                for (i, w) in chunk.iter().enumerate() {
                    sums.add(forecast.denormalized.row(i), ds.target(w));
                }
            }
            LossScale::Normalized => {
                for (i, w) in chunk.iter().enumerate() {
                    let st = &cache.stats[i];
                    let s = st.scale();
                    let t: Vec<f64> = ds.target(w).iter().map(|v| (v - st.mu) / s).collect();
                    sums.add(forecast.normalized.row(i), &t);
                }
            }
        }
    }
    sums.finish()
}

/// Repeats the last observed input value over the horizon.
pub fn persistence_baseline(ds: &SeriesDataset, windows: &[WindowIndex]) -> Result<Metrics> {
    let mut sums = ErrorSums::default();
    for w in windows {
        let last = *ds.input(w).last().expect("input_len > 0");
        sums.add(&vec![last; w.horizon], ds.target(w));
    }
    sums.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub curve: Vec<EpochRecord>,
    /// Validation MSE of the restored parameters; `None` when no step ran.
    pub best_val_mse: Option<f64>,
    pub best_epoch: Option<usize>,
    pub steps: usize,
    pub stopped_early: bool,
    /// Scalars touched by each Adam step; always equals the trainable count.
    pub updated_scalars: usize,
}

fn batch_targets(ds: &SeriesDataset, chunk: &[&WindowIndex]) -> Tensor {
    let horizon = chunk[0].horizon;
    let mut data = Vec::with_capacity(chunk.len() * horizon);
    for w in chunk {
        data.extend_from_slice(ds.target(w));
    }
    Tensor::from_parts(vec![chunk.len(), horizon], data)
}

fn with_step(step: usize, e: Error) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("step {step}: {m}")),
        e => e,
    }
}

/// Trains `model` in place and leaves it holding the parameters with the
/// lowest validation MSE seen at an epoch boundary.
pub fn train(
    model: &mut Forecaster,
    ds: &SeriesDataset,
    train_windows: &[WindowIndex],
    val_windows: &[WindowIndex],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::InsufficientData {
            segment: if train_windows.is_empty() {
                "train"
            } else {
                "val"
            }
            .into(),
            available: 0,
            required: 1,
        });
    }
    let mut rngs = RunRngs::new(cfg.seed);
    let mut adam = AdamState::new(&model.params, cfg.adam());
    let trainable = model.params.trainable_scalars();
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut outcome = TrainOutcome {
        curve: Vec::new(),
        best_val_mse: None,
        best_epoch: None,
        steps: 0,
        stopped_early: false,
        updated_scalars: trainable,
    };
    let mut best: Option<ParamSet> = None;
    let mut stale = 0;
    let budget = if cfg.max_steps == 0 {
        usize::MAX
    } else {
        cfg.max_steps
    };

    'epochs: for epoch in 1..=cfg.max_epochs {
        if outcome.steps >= budget {
            break;
        }
        order.shuffle(&mut rngs.shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if outcome.steps >= budget {
                break;
            }
            let step = outcome.steps + 1;
            let batch: Vec<&WindowIndex> = chunk.iter().map(|&i| &train_windows[i]).collect();
            let targets = batch_targets(ds, &batch);
            let loss = model
                .loss(
                    batch.iter().map(|w| ds.input(w)),
                    &targets,
                    cfg.loss_scale,
                    true,
                    true,
                    &mut rngs.dropout,
                )
                .map_err(|e| with_step(step, e))?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "training loss diverged at step {step}"
                )));
            }
            let updated = adam_step(&mut model.params, &mut adam)?;
            if updated != trainable {
                return Err(Error::State(format!(
                    "Adam updated {updated} scalars but {trainable} are trainable"
                )));
            }
            outcome.steps = step;
            loss_sum += loss;
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        let val = evaluate(
            model,
            ds,
            val_windows,
            cfg.eval_batch,
            LossScale::Denormalized,
        )?
        .mse;
        outcome.curve.push(EpochRecord {
            epoch,
            steps: outcome.steps,
            train_loss: loss_sum / batches as f64,
            val_mse: val,
        });
        if outcome.best_val_mse.is_none_or(|b| val < b) {
            outcome.best_val_mse = Some(val);
            outcome.best_epoch = Some(epoch);
            best = Some(model.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                outcome.stopped_early = true;
                break 'epochs;
            }
        }
    }
    if let Some(p) = best {
        model.params = p;
    }
    Ok(outcome)
}
