use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::{evaluate, persistence_baseline, train, EpochRecord, Metrics};
use crate::config::RunConfig;
use crate::data::{few_shot, split, windows, zero_shot_pair, Segment, SeriesDataset};
use crate::error::{Error, Result};
use crate::model::Forecaster;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Protocol {
    LongTerm,
    /// Train on the leading `fraction` of the training segment.
    FewShot {
        fraction: f64,
    },
    /// Train and validate on the source, test on the target.
    ZeroShot,
}

impl Protocol {
    pub fn label(&self) -> &'static str {
        match self {
            Protocol::LongTerm => "long_term",
            Protocol::FewShot { .. } => "few_shot",
            Protocol::ZeroShot => "zero_shot",
        }
    }
}

/// Outcome of one (protocol, horizon) run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub dataset: String,
    pub protocol: String,
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub persistence_mse: f64,
    pub persistence_mae: f64,
    pub params_total: usize,
    pub params_trainable: usize,
    pub seconds: f64,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_val_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub train_windows: usize,
    pub val_windows: usize,
    pub test_windows: usize,
    /// SHA-256 over all parameters after training, hex encoded.
    pub param_digest: String,
    pub loss_curve: Vec<EpochRecord>,
}

impl RunReport {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            mse: self.mse,
            mae: self.mae,
        }
    }
}

pub struct RunOutput {
    pub report: RunReport,
    pub model: Forecaster,
}

pub fn fingerprint_hex(bytes: &[u8; 32]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains one model for `horizon` under `protocol` and scores it on the
/// test segment.
pub fn run_horizon(
    cfg: &RunConfig,
    protocol: Protocol,
    source: &SeriesDataset,
    target: Option<&SeriesDataset>,
    horizon: usize,
) -> Result<RunOutput> {
    let started = Instant::now();
    let mut mcfg = cfg.model.clone();
    mcfg.horizon = horizon;
    let l = mcfg.input_len;
    let src_spec = cfg.data.split_spec()?;
    let (train_ranges, test_ds, test_ranges, name) = match protocol {
        Protocol::LongTerm => {
            let r = split(source.len(), &src_spec, l, horizon)?;
            (r.clone(), source, r, source.name.clone())
        }
        Protocol::FewShot { fraction } => {
            let r = split(source.len(), &src_spec, l, horizon)?;
            (
                few_shot(&r, fraction, l, horizon)?,
                source,
                r,
                source.name.clone(),
            )
        }
        Protocol::ZeroShot => {
            let target =
                target.ok_or_else(|| Error::Config("zero-shot needs a target dataset".into()))?;
            let plan = zero_shot_pair(
                source,
                &src_spec,
                target,
                &cfg.target.split_spec()?,
                l,
                horizon,
            )?;
            let name = format!("{}->{}", plan.source, plan.target);
            (plan.source_ranges, target, plan.target_ranges, name)
        }
    };
    let d = source.num_channels();
    let tr = windows(&train_ranges, Segment::Train, l, horizon, d, true)?;
    let va = windows(&train_ranges, Segment::Val, l, horizon, d, true)?;
    let te = windows(
        &test_ranges,
        Segment::Test,
        l,
        horizon,
        test_ds.num_channels(),
        true,
    )?;

    let mut model = Forecaster::new(mcfg, cfg.train.seed)?;
    let outcome = train(&mut model, source, &tr, &va, &cfg.train)?;
    let digest = model.params.fingerprint();
    let metrics = evaluate(
        &model,
        test_ds,
        &te,
        cfg.train.eval_batch,
        cfg.train.metric_scale,
    )?;
    if model.params.fingerprint() != digest {
        return Err(Error::State(
            "parameters changed during test evaluation".into(),
        ));
    }
    let base = persistence_baseline(test_ds, &te)?;
    let report = RunReport {
        dataset: name,
        protocol: protocol.label().into(),
        horizon,
        mse: metrics.mse,
        mae: metrics.mae,
        persistence_mse: base.mse,
        persistence_mae: base.mae,
        params_total: model.params.total_scalars(),
        params_trainable: model.params.trainable_scalars(),
        seconds: started.elapsed().as_secs_f64(),
        steps: outcome.steps,
        best_val_mse: outcome.best_val_mse,
        best_epoch: outcome.best_epoch,
        stopped_early: outcome.stopped_early,
        train_windows: tr.len(),
        val_windows: va.len(),
        test_windows: te.len(),
        param_digest: fingerprint_hex(&digest),
        loss_curve: outcome.curve,
    };
    Ok(RunOutput { report, model })
}

/// Scores an already trained `model` on the test segment of `ds`.
pub fn evaluate_only(cfg: &RunConfig, model: &Forecaster, ds: &SeriesDataset) -> Result<RunReport> {
    let started = Instant::now();
    let (l, horizon) = (model.config.input_len, model.config.horizon);
    let r = split(ds.len(), &cfg.data.split_spec()?, l, horizon)?;
    let te = windows(&r, Segment::Test, l, horizon, ds.num_channels(), true)?;
    let metrics = evaluate(model, ds, &te, cfg.train.eval_batch, cfg.train.metric_scale)?;
    let base = persistence_baseline(ds, &te)?;
    Ok(RunReport {
        dataset: ds.name.clone(),
        protocol: "eval".into(),
        horizon,
        mse: metrics.mse,
        mae: metrics.mae,
        persistence_mse: base.mse,
        persistence_mae: base.mae,
        params_total: model.params.total_scalars(),
        params_trainable: model.params.trainable_scalars(),
        seconds: started.elapsed().as_secs_f64(),
        steps: 0,
        best_val_mse: None,
        best_epoch: None,
        stopped_early: false,
        train_windows: 0,
        val_windows: 0,
        test_windows: te.len(),
        param_digest: fingerprint_hex(&model.params.fingerprint()),
        loss_curve: Vec::new(),
    })
}

/// Maps `f` over `items` on up to `jobs` threads, preserving order.
pub(crate) fn par_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

/// One run per configured horizon; independent runs use up to `jobs` threads.
pub fn run_protocol(
    cfg: &RunConfig,
    protocol: Protocol,
    source: &SeriesDataset,
    target: Option<&SeriesDataset>,
    jobs: usize,
) -> Result<Vec<RunOutput>> {
    cfg.validate()?;
    par_map(jobs, &cfg.train.horizons, |&h| {
        run_horizon(cfg, protocol, source, target, h)
    })
}

pub const METRICS_HEADER: [&str; 7] = [
    "dataset",
    "protocol",
    "horizon",
    "mse",
    "mae",
    "params_total",
    "params_trainable",
];

/// Per-horizon rows followed by an `avg` row over all horizons.
///
/// Wall-clock time is left to the report so that identical runs give
/// byte-identical files.
pub fn metrics_csv(reports: &[RunReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(METRICS_HEADER).map_err(io)?;
    for r in reports {
        w.write_record([
            r.dataset.clone(),
            r.protocol.clone(),
            r.horizon.to_string(),
            r.mse.to_string(),
            r.mae.to_string(),
            r.params_total.to_string(),
            r.params_trainable.to_string(),
        ])
        .map_err(io)?;
    }
    let per: Vec<Metrics> = reports.iter().map(RunReport::metrics).collect();
    if let (Some(avg), Some(first)) = (Metrics::average(&per), reports.first()) {
        w.write_record([
            first.dataset.clone(),
            first.protocol.clone(),
            "avg".into(),
            avg.mse.to_string(),
            avg.mae.to_string(),
            String::new(),
            String::new(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Wall-clock seconds per run, kept apart from the metrics.
pub fn timing_csv(reports: &[RunReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(["dataset", "protocol", "horizon", "seconds"])
        .map_err(io)?;
    for r in reports {
        w.write_record([
            r.dataset.clone(),
            r.protocol.clone(),
            r.horizon.to_string(),
            format!("{:.3}", r.seconds),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Serialize)]
struct ReportFile<'a> {
    config: &'a RunConfig,
    runs: &'a [RunReport],
}

/// Config snapshot plus every run, as TOML text.
pub fn report_text(cfg: &RunConfig, reports: &[RunReport]) -> Result<String> {
    toml::to_string_pretty(&ReportFile {
        config: cfg,
        runs: reports,
    })
    .map_err(|e| Error::Config(e.to_string()))
}
