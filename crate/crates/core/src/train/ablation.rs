use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::protocol::{par_map, run_protocol, Protocol};
use super::Metrics;
use crate::backbone::FreezePolicy;
use crate::config::RunConfig;
use crate::data::SeriesDataset;
use crate::error::{Error, Result};
use crate::mixers::{FusionVariant, LayerSelection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    FreezePolicy,
    FusionVariant,
    LayerSelection,
    NLayers,
    LocalTap,
    InputLen,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        Self::FreezePolicy,
        Self::FusionVariant,
        Self::LayerSelection,
        Self::NLayers,
        Self::LocalTap,
        Self::InputLen,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::FreezePolicy => "freeze_policy",
            Self::FusionVariant => "fusion_variant",
            Self::LayerSelection => "layer_selection",
            Self::NLayers => "n_layers",
            Self::LocalTap => "local_tap",
            Self::InputLen => "input_len",
        }
    }

    /// The standard sweep for this axis given the base configuration.
    pub fn default_values(self, cfg: &RunConfig) -> Vec<String> {
        match self {
            Self::FreezePolicy => FreezePolicy::ALL
                .iter()
                .map(|p| p.label().to_string())
                .collect(),
            Self::FusionVariant => FusionVariant::ALL
                .iter()
                .map(|v| v.label().to_string())
                .collect(),
            Self::LayerSelection => LayerSelection::ALL
                .iter()
                .map(|v| v.label().to_string())
                .collect(),
            Self::NLayers => ["2", "4", "6"].map(String::from).to_vec(),
            Self::LocalTap => (1..=cfg.model.backbone.n_layers)
                .map(|n| n.to_string())
                .collect(),
            Self::InputLen => ["96", "192", "336", "512", "720"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}`")))
    }
}

fn parse_count(axis: AblationAxis, value: &str) -> Result<usize> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{} value `{value}` is not a count", axis.label())))
}

/// Sets the field behind `axis` to `value`.
pub fn apply_axis(cfg: &mut RunConfig, axis: AblationAxis, value: &str) -> Result<()> {
    match axis {
        AblationAxis::FreezePolicy => cfg.model.freeze = value.parse()?,
        AblationAxis::FusionVariant => cfg.model.fusion.variant = value.parse()?,
        AblationAxis::LayerSelection => cfg.model.fusion.selection = value.parse()?,
        AblationAxis::NLayers => cfg.model.backbone.n_layers = parse_count(axis, value)?,
        AblationAxis::LocalTap => cfg.model.fusion.local_tap = parse_count(axis, value)?,
        AblationAxis::InputLen => cfg.model.input_len = parse_count(axis, value)?,
    }
    cfg.validate()
}

/// One line of a sweep: metrics averaged over the configured horizons.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub mse: f64,
    pub mae: f64,
    /// Counts for the first horizon; the head grows with the horizon.
    pub params_total: usize,
    pub params_trainable: usize,
    pub seconds: f64,
}

/// Runs the long-term protocol once per value, all else equal.
pub fn ablation_sweep(
    cfg: &RunConfig,
    axis: AblationAxis,
    values: &[String],
    source: &SeriesDataset,
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::Config(
            "ablation sweep needs at least one value".into(),
        ));
    }
    let cells: Vec<RunConfig> = values
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            apply_axis(&mut c, axis, v)?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(&String, &RunConfig)> = values.iter().zip(&cells).collect();
    par_map(jobs, &pairs, |(value, c)| {
        let started = Instant::now();
        let runs = run_protocol(c, Protocol::LongTerm, source, None, 1)?;
        let per: Vec<Metrics> = runs.iter().map(|r| r.report.metrics()).collect();
        let avg = Metrics::average(&per).expect("horizons are nonempty");
        Ok(AblationRow {
            axis: axis.label().into(),
            value: (*value).clone(),
            mse: avg.mse,
            mae: avg.mae,
            params_total: runs[0].report.params_total,
            params_trainable: runs[0].report.params_trainable,
            seconds: started.elapsed().as_secs_f64(),
        })
    })
}

#[derive(Serialize)]
struct AblationFile<'a> {
    config: &'a RunConfig,
    rows: &'a [AblationRow],
}

/// Base config snapshot plus every row, as TOML text.
pub fn ablation_report(cfg: &RunConfig, rows: &[AblationRow]) -> Result<String> {
    toml::to_string_pretty(&AblationFile { config: cfg, rows })
        .map_err(|e| Error::Config(e.to_string()))
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Data(e.to_string());
    w.write_record([
        "axis",
        "value",
        "mse",
        "mae",
        "params_total",
        "params_trainable",
    ])
    .map_err(io)?;
    for r in rows {
        w.write_record([
            r.axis.clone(),
            r.value.clone(),
            r.mse.to_string(),
            r.mae.to_string(),
            r.params_total.to_string(),
            r.params_trainable.to_string(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
