//! CSV ingestion, chronological splits and sliding windows.

mod split;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use split::{
    few_shot, input_window_count, pair_count, split, windows, zero_shot_pair, Segment, SplitKind,
    SplitRanges, SplitSpec, WindowIndex, ZeroShotPlan,
};

/// A multichannel series with equal-length channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    pub name: String,
    pub column_names: Vec<String>,
    pub channels: Vec<Vec<f64>>,
    pub timestamps: Option<Vec<String>>,
    pub frequency: String,
}

impl SeriesDataset {
    pub fn new(
        name: impl Into<String>,
        column_names: Vec<String>,
        channels: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if channels.is_empty() || column_names.len() != channels.len() {
            return Err(Error::Data(format!(
                "{} column names for {} channels",
                column_names.len(),
                channels.len()
            )));
        }
        let len = channels[0].len();
        if len == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        if let Some(c) = channels.iter().position(|c| c.len() != len) {
            return Err(Error::Data(format!(
                "channel `{}` length differs",
                column_names[c]
            )));
        }
        for (c, ch) in channels.iter().enumerate() {
            if let Some(r) = ch.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "non-finite value in `{}` at row {r}",
                    column_names[c]
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            column_names,
            channels,
            timestamps: None,
            frequency: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Input slice of a window.
    pub fn input(&self, w: &WindowIndex) -> &[f64] {
        &self.channels[w.channel][w.start..w.start + w.input_len]
    }

    /// Horizon slice of a window.
    pub fn target(&self, w: &WindowIndex) -> &[f64] {
        let s = w.start + w.input_len;
        &self.channels[w.channel][s..s + w.horizon]
    }
}

/// Which CSV columns to read.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvSchema {
    /// Timestamp column; used when present in the header, otherwise
    /// ignored. Empty means none.
    pub timestamp: String,
    /// Value columns in the order wanted. Empty means every other column.
    pub columns: Vec<String>,
}

impl CsvSchema {
    pub fn with_date() -> Self {
        Self {
            timestamp: "date".into(),
            columns: Vec::new(),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    let ts_col = if schema.timestamp.is_empty() {
        None
    } else {
        header.iter().position(|h| *h == schema.timestamp)
    };
    let value_cols: Vec<usize> = if schema.columns.is_empty() {
        (0..header.len()).filter(|&i| Some(i) != ts_col).collect()
    } else {
        schema
            .columns
            .iter()
            .map(|name| {
                header.iter().position(|h| h == name).ok_or_else(|| {
                    Error::Data(format!("{}: missing column `{name}`", path.display()))
                })
            })
            .collect::<Result<_>>()?
    };
    if value_cols.is_empty() {
        return Err(Error::Data(format!("{}: no value columns", path.display())));
    }

    let mut channels = vec![Vec::new(); value_cols.len()];
    let mut timestamps = ts_col.map(|_| Vec::new());
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        // header is line 1
        let row = i + 2;
        for (slot, &c) in value_cols.iter().enumerate() {
            let raw = record.get(c).unwrap_or("").trim();
            let cell = |reason: String| Error::Cell {
                path: PathBuf::from(path),
                row,
                column: header[c].clone(),
                reason,
            };
            let v: f64 = raw
                .parse()
                .map_err(|_| cell(format!("cannot parse `{raw}` as a number")))?;
            if !v.is_finite() {
                return Err(cell(format!("non-finite value `{raw}`")));
            }
            channels[slot].push(v);
        }
        if let (Some(ts), Some(c)) = (timestamps.as_mut(), ts_col) {
            ts.push(record.get(c).unwrap_or("").to_string());
        }
    }
    if channels[0].is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let names = value_cols.iter().map(|&c| header[c].clone()).collect();
    let mut ds = SeriesDataset::new(name, names, channels)?;
    ds.timestamps = timestamps;
    Ok(ds)
}

/// Dataset description as stored in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetManifest {
    pub name: String,
    pub path: PathBuf,
    /// Sampling interval such as `1h`, `15min` or `1d`.
    pub frequency: String,
    /// Use the fixed 12/4/4-month boundaries instead of ratios.
    pub ett_protocol: bool,
    /// Train, validation and test fractions.
    pub ratios: [f64; 3],
    pub lookback_overlap: bool,
    pub schema: CsvSchema,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            name: String::new(),
            path: PathBuf::new(),
            frequency: "1h".into(),
            ett_protocol: false,
            ratios: [0.7, 0.1, 0.2],
            lookback_overlap: true,
            schema: CsvSchema::with_date(),
        }
    }
}

impl DatasetManifest {
    pub fn load(&self) -> Result<SeriesDataset> {
        if self.path.as_os_str().is_empty() {
            return Err(Error::Config("dataset path is not set".into()));
        }
        let mut ds = load_csv(&self.path, &self.schema)?;
        if !self.name.is_empty() {
            ds.name = self.name.clone();
        }
        ds.frequency = self.frequency.clone();
        Ok(ds)
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        let kind = if self.ett_protocol {
            SplitKind::Ett {
                points_per_day: points_per_day(&self.frequency)?,
            }
        } else {
            let [train, val, test] = self.ratios;
            SplitKind::Ratios { train, val, test }
        };
        Ok(SplitSpec {
            kind,
            lookback_overlap: self.lookback_overlap,
        })
    }
}

/// Minutes between consecutive rows for strings like `1h`, `15min`, `10T`, `d`.
pub fn frequency_minutes(freq: &str) -> Result<u64> {
    let f = freq.trim().to_ascii_lowercase();
    let split = f.find(|c: char| !c.is_ascii_digit()).unwrap_or(f.len());
    let (num, unit) = f.split_at(split);
    let n: u64 = if num.is_empty() {
        1
    } else {
        num.parse()
            .map_err(|_| Error::Config(format!("bad frequency `{freq}`")))?
    };
    let per = match unit {
        "min" | "t" | "m" => 1,
        "h" => 60,
        "d" => 1440,
        _ => return Err(Error::Config(format!("unknown frequency unit in `{freq}`"))),
    };
    if n == 0 {
        return Err(Error::Config(format!("bad frequency `{freq}`")));
    }
    Ok(n * per)
}

pub fn points_per_day(freq: &str) -> Result<usize> {
    let m = frequency_minutes(freq)?;
    if 1440 % m != 0 {
        return Err(Error::Config(format!(
            "frequency `{freq}` does not divide a day"
        )));
    }
    Ok((1440 / m) as usize)
}
