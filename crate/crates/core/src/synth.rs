//! Seeded synthetic series written in the same CSV layout the loader reads.

use std::f64::consts::{PI, SQRT_2};
use std::fmt::Write as _;
use std::path::Path;

use chrono::{NaiveDate, TimeDelta};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::SeriesDataset;
use crate::error::{Error, Result};
use crate::numerics::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    SineMix,
    /// Every channel equals the row index.
    Ramp,
    /// Standard normal draws scaled by `noise`.
    Noise,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "sine_mix" => Ok(Self::SineMix),
            "ramp" => Ok(Self::Ramp),
            "noise" => Ok(Self::Noise),
            _ => Err(Error::Config(format!("unknown synthetic kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub length: usize,
    pub channels: usize,
    pub seed: u64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// The series must hold at least two `input_len + horizon` spans.
    pub input_len: usize,
    pub horizon: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: SynthKind::SineMix,
            length: 4000,
            channels: 2,
            seed: 0,
            noise: 0.05,
            input_len: 96,
            horizon: 96,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineComponent {
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
}

impl SineComponent {
    pub fn at(&self, t: f64) -> f64 {
        self.amplitude * (2.0 * PI * t / self.period + self.phase).sin()
    }
}

/// Base periods with irrational ratios so the mix never repeats exactly.
const BASE_PERIODS: [f64; 3] = [24.0, 24.0 * SQRT_2, 24.0 * 5.0 * 1.618_033_988_749_895];

/// The sinusoids making up each channel of a `sine_mix` series.
pub fn sine_components(seed: u64, channels: usize) -> Vec<Vec<SineComponent>> {
    let mut rng = stream(seed, 10);
    (0..channels)
        .map(|_| {
            let count = rng.random_range(2..=3);
            BASE_PERIODS[..count]
                .iter()
                .map(|&p| SineComponent {
                    amplitude: rng.random_range(0.5..1.5),
                    period: p * rng.random_range(0.9..1.1),
                    phase: rng.random_range(0.0..2.0 * PI),
                })
                .collect()
        })
        .collect()
}

pub fn generate(spec: &SynthSpec) -> Result<SeriesDataset> {
    let min = 2 * (spec.input_len + spec.horizon);
    if spec.length < min {
        return Err(Error::InsufficientData {
            segment: "synthetic series".into(),
            available: spec.length,
            required: min,
        });
    }
    if spec.channels == 0 {
        return Err(Error::Config(
            "synthetic series needs at least one channel".into(),
        ));
    }
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = stream(spec.seed, 11);
    let channels: Vec<Vec<f64>> = match spec.kind {
        SynthKind::Ramp => vec![(0..spec.length).map(|i| i as f64).collect(); spec.channels],
        SynthKind::Noise => (0..spec.channels)
            .map(|_| (0..spec.length).map(|_| noise.sample(&mut rng)).collect())
            .collect(),
        SynthKind::SineMix => sine_components(spec.seed, spec.channels)
            .iter()
            .map(|comps| {
                (0..spec.length)
                    .map(|i| {
                        let clean: f64 = comps.iter().map(|c| c.at(i as f64)).sum();
                        if spec.noise > 0.0 {
                            clean + noise.sample(&mut rng)
                        } else {
                            clean
                        }
                    })
                    .collect()
            })
            .collect(),
    };
    let names = (0..spec.channels).map(|c| format!("c{c}")).collect();
    let mut ds = SeriesDataset::new(format!("{:?}", spec.kind).to_lowercase(), names, channels)?;
    ds.frequency = "1h".into();
    let origin = NaiveDate::from_ymd_opt(2016, 7, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid origin");
    ds.timestamps = Some(
        (0..spec.length)
            .map(|i| {
                (origin + TimeDelta::hours(i as i64))
                    .format("%Y-%m-%d %H:%M:%S")
                    .to_string()
            })
            .collect(),
    );
    Ok(ds)
}

/// CSV text with a `date` column; values use the shortest exact decimal form.
pub fn to_csv(ds: &SeriesDataset) -> String {
    let mut s = String::new();
    let has_ts = ds.timestamps.is_some();
    if has_ts {
        s.push_str("date,");
    }
    s.push_str(&ds.column_names.join(","));
    s.push('\n');
    for i in 0..ds.len() {
        if let Some(ts) = &ds.timestamps {
            write!(s, "{},", ts[i]).unwrap();
        }
        for (c, ch) in ds.channels.iter().enumerate() {
            if c > 0 {
                s.push(',');
            }
            write!(s, "{}", ch[i]).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn write_csv(ds: &SeriesDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv(ds)).map_err(|e| Error::io(path, e))
}
